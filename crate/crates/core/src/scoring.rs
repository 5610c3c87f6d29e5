//! Turns decoder outputs into per-pixel class predictions and OOD confidences.

use serde::{Deserialize, Serialize};

use crate::diffcore::kernels::{sigmoid, softmax_rows};
use crate::error::{dim_err, Error, Result};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!("mask {height}x{width} given {} values", data.len()));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![false; height * width] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// How OOD-query responsibilities are pooled into one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Max,
    /// Sum, clipped to 1.
    Sum,
}

impl std::str::FromStr for Aggregate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregate::Max),
            "sum" => Ok(Aggregate::Sum),
            other => Err(Error::Config(format!("unknown aggregate `{other}` (max|sum)"))),
        }
    }
}

/// Per-pixel OOD confidence in [0,1] and predicted class.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub ood_score: Vec<f64>,
    pub pred_class: Vec<usize>,
}

impl ScoreMap {
    /// Scores equal to the ground-truth indicator, every OOD pixel labelled `ood_class`.
    pub fn from_mask(mask: &BinaryMask, ood_class: usize) -> Self {
        ScoreMap {
            height: mask.height,
            width: mask.width,
            ood_score: mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            pred_class: mask.data.iter().map(|&b| if b { ood_class } else { 0 }).collect(),
        }
    }
}

/// Scores `mask_logits[Q × (H·W)]` (already at image resolution).
///
/// Query `q`'s responsibility at a pixel is the softmax probability of its
/// assigned class times the sigmoid of its mask logit. `assignment[q]` is the
/// class of query `q`; queries assigned to `ood_class` feed the OOD score.
pub fn score(
    class_logits: &[f64],
    mask_logits: &[f64],
    assignment: &[usize],
    ood_class: usize,
    height: usize,
    width: usize,
    aggregate: Aggregate,
) -> Result<ScoreMap> {
    let queries = assignment.len();
    if queries == 0 {
        return Err(Error::InvalidArgument("no queries to score".into()));
    }
    let classes = ood_class + 1;
    if class_logits.len() != queries * classes {
        return Err(dim_err!(
            "class logits hold {} values, expected {queries}x{classes}",
            class_logits.len()
        ));
    }
    let pixels = height * width;
    if mask_logits.len() != queries * pixels {
        return Err(dim_err!(
            "mask logits hold {} values, expected {queries}x{pixels}",
            mask_logits.len()
        ));
    }
    if class_logits.iter().chain(mask_logits).any(|v| !v.is_finite()) {
        return Err(Error::InvalidState("non-finite logit passed to scoring".into()));
    }
    if let Some(&a) = assignment.iter().find(|&&a| a >= classes) {
        return Err(Error::Index(format!("query assigned to class {a} of {classes}")));
    }

    let probs = softmax_rows(class_logits, queries, classes);
    let class_prob: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(q, &a)| probs[q * classes + a])
        .collect();

    let mut ood_score = vec![0.0; pixels];
    let mut pred_class = vec![0; pixels];
    for p in 0..pixels {
        let mut best = f64::NEG_INFINITY;
        let mut best_q = 0;
        let mut ood = 0.0f64;
        for q in 0..queries {
            let r = class_prob[q] * sigmoid(mask_logits[q * pixels + p]);
            if r > best {
                best = r;
                best_q = q;
            }
            if assignment[q] == ood_class {
                ood = match aggregate {
                    Aggregate::Max => ood.max(r),
                    Aggregate::Sum => ood + r,
                };
            }
        }
        ood_score[p] = ood.clamp(0.0, 1.0);
        pred_class[p] = assignment[best_q];
    }
    Ok(ScoreMap { height, width, ood_score, pred_class })
}

/// Pixels with score ≥ `t`.
pub fn score_threshold(map: &ScoreMap, t: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside [0,1]")));
    }
    Ok(BinaryMask {
        height: map.height,
        width: map.width,
        data: map.ood_score.iter().map(|&s| s >= t).collect(),
    })
}
