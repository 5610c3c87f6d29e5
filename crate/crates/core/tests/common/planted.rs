//! A 100-token corpus whose similarity to the ID labels is planted by construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textood::textspace::Corpus;

pub const IDS: [&str; 4] = ["sky", "road", "car", "person"];
const DIM: usize = 8;

/// Four ID tokens on the first four axes and 96 candidates, each at a distinct
/// planted cosine to one ID axis and orthogonal to the others. Candidate order
/// is shuffled so that corpus order says nothing about similarity.
pub fn corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<String> = IDS.iter().map(|s| s.to_string()).collect();
    let mut vectors: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..DIM).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut levels: Vec<usize> = (0..96).collect();
    levels.shuffle(&mut rng);
    for (j, &lvl) in levels.iter().enumerate() {
        let s = 0.05 + 0.9 * lvl as f64 / 95.0;
        let mut u: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= n);
        let mut v = vec![0.0; DIM];
        v[j % 4] = s;
        for (k, x) in u.iter().enumerate() {
            v[4 + k] = (1.0 - s * s).sqrt() * x;
        }
        // a random positive scale must not matter
        let scale = rng.random_range(0.5..3.0);
        tokens.push(format!("w{j:02}"));
        vectors.push(v.into_iter().map(|x| x * scale).collect());
    }
    Corpus { tokens, vectors }
}

/// Exhaustive oracle: every candidate's maximum cosine to the ID vectors,
/// then the candidates whose count of strictly-less-similar peers lies in
/// `[ceil(q·n), ceil(q·n) + m)`, listed by that count.
pub fn oracle_selection(c: &Corpus, m: usize, q: f64) -> Vec<String> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let ids: Vec<&Vec<f64>> = c.tokens.iter().zip(&c.vectors).filter(|(t, _)| IDS.contains(&t.as_str())).map(|(_, v)| v).collect();
    let cands: Vec<(&String, f64)> = c
        .tokens
        .iter()
        .zip(&c.vectors)
        .filter(|(t, _)| !IDS.contains(&t.as_str()))
        .map(|(t, v)| (t, ids.iter().map(|x| cos(v, x)).fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    let n = cands.len();
    let cut = (q * n as f64).ceil() as usize;
    let mut ranked: Vec<(usize, &String)> = cands
        .iter()
        .map(|(t, s)| (cands.iter().filter(|(_, o)| o < s).count(), *t))
        .filter(|(rank, _)| (cut..cut + m).contains(rank))
        .collect();
    ranked.sort();
    ranked.into_iter().map(|(_, t)| t.clone()).collect()
}
