use crate::diffcore::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::synthio::LabeledScene;

pub const DICE_EPS: f64 = 1.0;

/// `‖f_global − f_global_freeze‖²`.
pub fn loss_backbone_v(tape: &mut Tape, f_global: Var, f_frozen: Var) -> Result<Var> {
    tape.squared_l2(f_global, f_frozen)
}

/// Cross-entropy of `f_local · e_kᵀ` against per-token classes, averaged over tokens.
pub fn loss_backbone_vl(tape: &mut Tape, f_local: Var, text: Var, token_class: &[usize]) -> Result<Var> {
    let s = tape.matmul_bt(f_local, text)?;
    tape.cross_entropy(s, token_class)
}

/// Token classes for a patch grid: the outlier class if any pixel of the patch
/// is an outlier, otherwise its most frequent ID class (lowest on ties).
pub fn token_classes(scene: &LabeledScene, patch: usize, num_classes: usize) -> Result<Vec<usize>> {
    let (h, w) = (scene.height, scene.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(dim_err!("{h}x{w} scene is not divisible into {patch}-pixel patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw);
    let mut counts = vec![0usize; num_classes];
    for ty in 0..gh {
        for tx in 0..gw {
            counts.iter_mut().for_each(|c| *c = 0);
            let mut ood = false;
            for y in ty * patch..(ty + 1) * patch {
                for x in tx * patch..(tx + 1) * patch {
                    let p = y * w + x;
                    if scene.ood_mask[p] {
                        ood = true;
                    } else {
                        let c = scene.class_map[p] as usize;
                        if c >= num_classes {
                            return Err(Error::Index(format!("class {c} of {num_classes}")));
                        }
                        counts[c] += 1;
                    }
                }
            }
            let best = if ood {
                num_classes
            } else {
                let mut best = 0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > counts[best] {
                        best = c;
                    }
                }
                best
            };
            out.push(best);
        }
    }
    Ok(out)
}

/// Binary target of class `class` at every pixel (`num_classes` means outlier).
pub fn class_target(scene: &LabeledScene, class: usize) -> Vec<f64> {
    scene.class_map.iter().map(|&c| if c as usize == class { 1.0 } else { 0.0 }).collect()
}

/// Pieces of the mask-classification loss.
pub struct SegLoss {
    pub total: Var,
    pub class_term: Var,
    pub mask_terms: Option<Var>,
}

/// Fixed-assignment mask classification loss.
///
/// Every query contributes its presence term. Queries whose class occurs in
/// `targets` also contribute BCE + Dice of their mask against it.
/// `targets[c]` is the binary map of class `c`, `None` when absent.
pub fn loss_mask2former(
    tape: &mut Tape,
    class_logits: Var,
    mask_logits: Var,
    assignment: &[usize],
    targets: &[Option<Vec<f64>>],
) -> Result<SegLoss> {
    let (q, cols) = match tape.value(class_logits).shape() {
        [q, c] => (*q, *c),
        s => return Err(dim_err!("class logits of shape {s:?}")),
    };
    if assignment.len() != q || targets.len() != cols {
        return Err(dim_err!(
            "{} assignments and {} targets for {q} queries over {cols} classes",
            assignment.len(),
            targets.len()
        ));
    }
    let present: Vec<bool> = assignment.iter().map(|&a| targets.get(a).is_some_and(Option::is_some)).collect();
    let class_term = tape.presence_nll(class_logits, assignment, &present)?;
    let mut terms = Vec::new();
    for (i, &a) in assignment.iter().enumerate() {
        if let Some(t) = &targets[a] {
            let m = tape.slice_rows(mask_logits, i, i + 1)?;
            let bce = tape.bce_with_logits(m, t)?;
            let p = tape.sigmoid(m);
            let dice = tape.dice_loss(p, t, DICE_EPS)?;
            terms.push(bce);
            terms.push(dice);
        }
    }
    let mask_terms = if terms.is_empty() { None } else { Some(tape.add_all(&terms)?) };
    let total = match mask_terms {
        Some(m) => tape.add(class_term, m)?,
        None => class_term,
    };
    Ok(SegLoss { total, class_term, mask_terms })
}

/// Per-class targets of a scene at image resolution.
pub fn scene_targets(scene: &LabeledScene, num_classes: usize) -> Vec<Option<Vec<f64>>> {
    (0..=num_classes)
        .map(|c| {
            let t = class_target(scene, c);
            t.iter().any(|&v| v == 1.0).then_some(t)
        })
        .collect()
}
