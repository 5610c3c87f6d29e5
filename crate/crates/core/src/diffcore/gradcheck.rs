//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative error per checked input, measured as `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖, GRAD_FLOOR)`
/// over the checked coordinates. The floor keeps structurally zero gradients
/// (a key bias under softmax, say) from scoring rounding noise as error.
pub const GRAD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks `d f / d inputs` against central differences with step `h`.
///
/// `max_coords` caps how many coordinates of each input are perturbed
/// (evenly strided); `None` perturbs all of them.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64, max_coords: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        let n = inputs[i].numel();
        let stride = match max_coords {
            Some(m) if m < n => n.div_ceil(m),
            _ => 1,
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for c in (0..n).step_by(stride) {
            let orig = inputs[i].data()[c];
            work[i].data_mut()[c] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[c] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[c];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(GRAD_FLOOR);
        rel_errors.push(diff2.sqrt() / denom);
    }
    Ok(GradCheckReport { rel_errors })
}
