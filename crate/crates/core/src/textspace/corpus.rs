use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const TEXT_DIM: usize = 32;
pub const CORPUS_SEED: u64 = 7;
pub const CORPUS_WORDS: usize = 1000;

static BUNDLED: &str = include_str!("../../data/corpus.tsv");

/// Tokens with their raw embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl Corpus {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The corpus shipped with the crate.
    pub fn bundled() -> Corpus {
        Corpus::parse(BUNDLED).expect("bundled corpus parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Corpus> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Corpus::parse(&text)
    }

    /// `token<TAB>v1,v2,…` per line.
    pub fn parse(text: &str) -> Result<Corpus> {
        let mut tokens = Vec::new();
        let mut vectors: Vec<Vec<f64>> = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Format(format!("corpus line {}: {msg}", n + 1));
            let (tok, vals) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            if tok.is_empty() {
                return Err(bad("empty token"));
            }
            let v = vals
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite value"));
            }
            if let Some(first) = vectors.first() {
                if first.len() != v.len() {
                    return Err(Error::Dimension(format!(
                        "corpus line {}: {} values, expected {}",
                        n + 1,
                        v.len(),
                        first.len()
                    )));
                }
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(bad("zero vector"));
            }
            if !seen.insert(tok.to_string()) {
                return Err(bad(&format!("duplicate token `{tok}`")));
            }
            tokens.push(tok.to_string());
            vectors.push(v);
        }
        if tokens.is_empty() {
            return Err(Error::Format("empty corpus".into()));
        }
        Ok(Corpus { tokens, vectors })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, v) in self.tokens.iter().zip(&self.vectors) {
            s.push_str(t);
            s.push('\t');
            s.push_str(&v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }

    /// Pseudo-words followed by `extra` tokens, each with a seeded Gaussian
    /// direction normalized to unit length and rounded to six decimals.
    pub fn generate(seed: u64, words: usize, extra: &[&str], dim: usize) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen: HashSet<String> = extra.iter().map(|s| s.to_string()).collect();
        let mut tokens = Vec::with_capacity(words + extra.len());
        while tokens.len() < words {
            let w = pseudo_word(&mut rng);
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        tokens.extend(extra.iter().map(|s| s.to_string()));
        let vectors = tokens
            .iter()
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| ((x / n) * 1e6).round() / 1e6).collect()
            })
            .collect();
        Corpus { tokens, vectors }
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(C[rng.random_range(0..C.len())] as char);
        w.push(V[rng.random_range(0..V.len())] as char);
    }
    if rng.random_bool(0.3) {
        w.push(C[rng.random_range(0..C.len())] as char);
    }
    w
}
