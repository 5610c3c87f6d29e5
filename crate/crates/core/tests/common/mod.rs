#![allow(dead_code)]

pub mod composed;
pub mod gradcases;
pub mod oracles;
pub mod planted;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random score/label vector of length ≤ 500 with both classes present and frequent ties.
pub fn random_scores(seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=500);
    let levels = rng.random_range(3..60) as f64;
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&l| {
            let base: f64 = rng.random_range(0.0..1.0) + if l { 0.3 } else { 0.0 };
            (base * levels).floor() / levels
        })
        .collect();
    (scores, labels)
}

/// Random blobby ground truth and a noisy score map over an `h×w` grid.
pub fn random_scene_scores(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let mut gt = vec![false; h * w];
    for _ in 0..rng.random_range(0..4) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (rh, cw) = (rng.random_range(1..5), rng.random_range(1..5));
        for r in r0..(r0 + rh).min(h) {
            for c in c0..(c0 + cw).min(w) {
                gt[r * w + c] = true;
            }
        }
    }
    let scores = gt
        .iter()
        .map(|&g| {
            let v: f64 = rng.random_range(0.0..0.7) + if g { 0.35 } else { 0.0 };
            ((v.min(1.0)) * 20.0).round() / 20.0
        })
        .collect();
    (scores, gt)
}
