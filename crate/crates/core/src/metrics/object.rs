use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::scoring::{score_threshold, BinaryMask, ScoreMap};

/// Minimum component IoU for a predicted/ground-truth pair to count as a hit.
pub const MATCH_IOU: f64 = 0.5;

/// `|∩| / |∪|`, 1.0 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize)> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(dim_err!(
            "mask shapes {}x{} and {}x{} differ",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    let (mut i, mut u) = (0, 0);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        i += (p && g) as usize;
        u += (p || g) as usize;
    }
    Ok((i, u))
}

/// 8-connected component labels (`0` = background, components numbered from 1) and the count.
pub fn connected_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask.data[q] && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Component-level confusion counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy one-to-one matching of components by descending IoU, hits at IoU ≥ 0.5.
pub fn match_components(pred: &BinaryMask, gt: &BinaryMask) -> Result<ComponentCounts> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(dim_err!("mask shapes differ"));
    }
    let (pl, np) = connected_components(pred);
    let (gl, ng) = connected_components(gt);
    let mut psize = vec![0usize; np + 1];
    let mut gsize = vec![0usize; ng + 1];
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&a, &b) in pl.iter().zip(&gl) {
        psize[a as usize] += 1;
        gsize[b as usize] += 1;
        if a != 0 && b != 0 {
            *inter.entry((a, b)).or_default() += 1;
        }
    }
    let mut pairs: Vec<(f64, u32, u32)> = inter
        .into_iter()
        .map(|((a, b), i)| {
            let u = psize[a as usize] + gsize[b as usize] - i;
            (i as f64 / u as f64, a, b)
        })
        .filter(|&(v, _, _)| v >= MATCH_IOU)
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut pused = vec![false; np + 1];
    let mut gused = vec![false; ng + 1];
    let mut tp = 0;
    for (_, a, b) in pairs {
        if !pused[a as usize] && !gused[b as usize] {
            pused[a as usize] = true;
            gused[b as usize] = true;
            tp += 1;
        }
    }
    Ok(ComponentCounts { tp, fp: np - tp, fn_: ng - tp })
}

pub fn f1(c: ComponentCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub t: f64,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEval {
    pub auiou: f64,
    pub best_iou: f64,
    pub mean_f1: f64,
    pub per_threshold: Vec<ThresholdPoint>,
}

/// `n` evenly spaced thresholds in (0, 1]: `1/n, 2/n, …, 1`.
pub fn default_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("threshold grid must be strictly increasing in [0,1]".into()));
    }
    Ok(())
}

/// Object-level counts pooled over images; pixel intersections/unions and
/// component confusions are summed per threshold before the ratios are taken.
#[derive(Clone, Debug)]
pub struct ObjectAccumulator {
    grid: Vec<f64>,
    inter: Vec<usize>,
    union: Vec<usize>,
    comps: Vec<ComponentCounts>,
}

impl ObjectAccumulator {
    pub fn new(grid: &[f64]) -> Result<Self> {
        validate_grid(grid)?;
        let n = grid.len();
        Ok(ObjectAccumulator {
            grid: grid.to_vec(),
            inter: vec![0; n],
            union: vec![0; n],
            comps: vec![ComponentCounts::default(); n],
        })
    }

    pub fn add(&mut self, map: &ScoreMap, gt: &BinaryMask) -> Result<()> {
        for (i, &t) in self.grid.iter().enumerate() {
            let pred = score_threshold(map, t)?;
            let (a, b) = overlap(&pred, gt)?;
            self.inter[i] += a;
            self.union[i] += b;
            let c = match_components(&pred, gt)?;
            self.comps[i].tp += c.tp;
            self.comps[i].fp += c.fp;
            self.comps[i].fn_ += c.fn_;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ObjectAccumulator) {
        for i in 0..self.grid.len() {
            self.inter[i] += other.inter[i];
            self.union[i] += other.union[i];
            self.comps[i].tp += other.comps[i].tp;
            self.comps[i].fp += other.comps[i].fp;
            self.comps[i].fn_ += other.comps[i].fn_;
        }
    }

    pub fn finish(&self) -> ObjectEval {
        let per_threshold: Vec<ThresholdPoint> = self
            .grid
            .iter()
            .enumerate()
            .map(|(i, &t)| ThresholdPoint {
                t,
                iou: if self.union[i] == 0 { 1.0 } else { self.inter[i] as f64 / self.union[i] as f64 },
                f1: f1(self.comps[i]),
            })
            .collect();
        let n = per_threshold.len();
        let auiou = if n == 1 {
            per_threshold[0].iou
        } else {
            let area: f64 = per_threshold
                .windows(2)
                .map(|w| 0.5 * (w[0].iou + w[1].iou) * (w[1].t - w[0].t))
                .sum();
            area / (per_threshold[n - 1].t - per_threshold[0].t)
        };
        ObjectEval {
            auiou,
            best_iou: per_threshold.iter().map(|p| p.iou).fold(0.0, f64::max),
            mean_f1: per_threshold.iter().map(|p| p.f1).sum::<f64>() / n as f64,
            per_threshold,
        }
    }
}

/// Object-level evaluation of a single image over a threshold grid.
pub fn object_eval(map: &ScoreMap, gt: &BinaryMask, grid: &[f64]) -> Result<ObjectEval> {
    let mut acc = ObjectAccumulator::new(grid)?;
    acc.add(map, gt)?;
    Ok(acc.finish())
}
