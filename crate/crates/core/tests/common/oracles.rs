//! Brute-force reference implementations. Deliberately share no code with the crate.

/// Every distinct score is tried as a threshold; AP = Σ ΔR·P.
pub fn auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for t in ts {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                if *l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let r = tp / pos;
        ap += (r - prev_r) * (tp / (tp + fp));
        prev_r = r;
    }
    ap
}

pub fn fpr_at_tpr(scores: &[f64], labels: &[bool], target: f64) -> f64 {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.push(f64::INFINITY);
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut best = f64::INFINITY;
    for t in ts {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && !**l).count() as f64;
        if tp / pos >= target {
            best = best.min(fp / neg);
        }
    }
    best
}

pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let i = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let u = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn find(parent: &mut Vec<usize>, x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut y = x;
    while parent[y] != r {
        let next = parent[y];
        parent[y] = r;
        y = next;
    }
    r
}

/// Union-find 8-connected components; each returned as a sorted pixel list,
/// components ordered by their first pixel in raster order.
pub fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < h as i64 && nc >= 0 && nc < w as i64 && mask[nr as usize * w + nc as usize] {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, nr as usize * w + nc as usize);
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for p in 0..h * w {
        if mask[p] {
            let root = find(&mut parent, p);
            groups.entry(root).or_default().push(p);
        }
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
    comps.sort_by_key(|c| c[0]);
    comps
}

/// (tp, fp, fn) with greedy matching: repeatedly take the best remaining pair with IoU ≥ 0.5.
pub fn component_counts(pred: &[bool], gt: &[bool], h: usize, w: usize) -> (usize, usize, usize) {
    let pc = components(pred, h, w);
    let gc = components(gt, h, w);
    let mut pairs = Vec::new();
    for (i, a) in pc.iter().enumerate() {
        for (j, b) in gc.iter().enumerate() {
            let inter = a.iter().filter(|p| b.contains(p)).count();
            if inter > 0 {
                let v = inter as f64 / (a.len() + b.len() - inter) as f64;
                pairs.push((v, i, j));
            }
        }
    }
    let mut used_p = vec![false; pc.len()];
    let mut used_g = vec![false; gc.len()];
    let mut tp = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for &(v, i, j) in &pairs {
            if used_p[i] || used_g[j] || v < 0.5 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bv, bi, bj)) => v > bv || (v == bv && (i, j) < (bi, bj)),
            };
            if better {
                best = Some((v, i, j));
            }
        }
        match best {
            Some((_, i, j)) => {
                used_p[i] = true;
                used_g[j] = true;
                tp += 1;
            }
            None => break,
        }
    }
    (tp, pc.len() - tp, gc.len() - tp)
}

pub struct ObjectOracle {
    pub ious: Vec<f64>,
    pub f1s: Vec<f64>,
    pub auiou: f64,
    pub best_iou: f64,
    pub mean_f1: f64,
}

/// Pooled over images: sums of intersections, unions, and component counts per threshold.
pub fn object_eval(images: &[(Vec<f64>, Vec<bool>)], h: usize, w: usize, grid: &[f64]) -> ObjectOracle {
    let mut ious = Vec::new();
    let mut f1s = Vec::new();
    for &t in grid {
        let (mut i, mut u, mut tp, mut fp, mut fn_) = (0, 0, 0, 0, 0);
        for (scores, gt) in images {
            let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
            i += pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
            u += pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
            let (a, b, c) = component_counts(&pred, gt, h, w);
            tp += a;
            fp += b;
            fn_ += c;
        }
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
        let d = 2 * tp + fp + fn_;
        f1s.push(if d == 0 { 1.0 } else { 2.0 * tp as f64 / d as f64 });
    }
    let mut area = 0.0;
    for k in 1..grid.len() {
        area += (grid[k] - grid[k - 1]) * (ious[k] + ious[k - 1]) / 2.0;
    }
    let auiou = if grid.len() == 1 { ious[0] } else { area / (grid[grid.len() - 1] - grid[0]) };
    let best_iou = ious.iter().cloned().fold(0.0, f64::max);
    let mean_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    ObjectOracle { ious, f1s, auiou, best_iou, mean_f1 }
}
