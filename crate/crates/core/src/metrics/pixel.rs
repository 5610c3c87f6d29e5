use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Pixel-level summary over a pooled score/label set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelEval {
    pub auprc: f64,
    pub fpr95: f64,
    /// `(recall, precision)` at every distinct score threshold, descending threshold.
    pub curve: Vec<(f64, f64)>,
}

struct Sweep {
    positives: usize,
    negatives: usize,
    /// cumulative (tp, fp) after each group of tied scores, descending score
    steps: Vec<(usize, usize)>,
}

fn sweep(scores: &[f64], labels: &[bool]) -> Result<Sweep> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {positives} positives and {negatives} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp, fp));
    }
    Ok(Sweep { positives, negatives, steps })
}

/// Average precision: Σ over thresholds of (ΔRecall · Precision), tied scores forming one threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let sw = sweep(scores, labels)?;
    let p = sw.positives as f64;
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for &(tp, fp) in &sw.steps {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / p * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

/// Lowest false-positive rate over thresholds (distinct scores ∪ {+∞}) whose TPR ≥ `tpr_target`.
pub fn fpr_at_tpr(scores: &[f64], labels: &[bool], tpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::InvalidArgument(format!("tpr target {tpr_target} outside [0,1]")));
    }
    let sw = sweep(scores, labels)?;
    if tpr_target <= 0.0 {
        return Ok(0.0);
    }
    let (p, n) = (sw.positives as f64, sw.negatives as f64);
    // FPR is non-decreasing along the sweep, so the first qualifying threshold is the minimum.
    for &(tp, fp) in &sw.steps {
        if tp as f64 / p >= tpr_target {
            return Ok(fp as f64 / n);
        }
    }
    Ok(1.0)
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let sw = sweep(scores, labels)?;
    let p = sw.positives as f64;
    Ok(sw
        .steps
        .iter()
        .map(|&(tp, fp)| (tp as f64 / p, tp as f64 / (tp + fp) as f64))
        .collect())
}

pub fn pixel_eval(scores: &[f64], labels: &[bool]) -> Result<PixelEval> {
    Ok(PixelEval {
        auprc: auprc(scores, labels)?,
        fpr95: fpr_at_tpr(scores, labels, 0.95)?,
        curve: pr_curve(scores, labels)?,
    })
}
