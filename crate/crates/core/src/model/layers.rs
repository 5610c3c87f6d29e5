use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Adds named, randomly initialised tensors to a set.
pub(crate) struct Init<'a> {
    pub set: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn gaussian(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive shape")
    }

    /// `name.w [fan_in × fan_out]` with std `gain/√fan_in`, `name.b` zero.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let w = self.gaussian(&[fan_in, fan_out], gain / (fan_in as f64).sqrt());
        self.set.insert(format!("{name}.w"), w);
        self.set.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    }

    pub fn linear_zero(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.set.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        self.set.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    }

    pub fn norm(&mut self, name: &str, d: usize) {
        self.set.insert(format!("{name}.g"), Tensor::full(&[1, d], 1.0));
        self.set.insert(format!("{name}.b"), Tensor::zeros(&[1, d]));
    }

    pub fn embedding(&mut self, name: &str, rows: usize, d: usize, std: f64) {
        let t = self.gaussian(&[rows, d], std);
        self.set.insert(name, t);
    }

    /// Query/key/value/output projections of a single-head attention.
    pub fn attention(&mut self, name: &str, d_q: usize, d_kv: usize, d: usize) {
        self.linear(&format!("{name}.q"), d_q, d, 1.0);
        self.linear(&format!("{name}.k"), d_kv, d, 1.0);
        self.linear(&format!("{name}.v"), d_kv, d, 1.0);
        self.linear(&format!("{name}.o"), d, d_q, 0.5);
    }
}

pub(crate) fn linear(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b.get(&format!("{name}.w"))?)?;
    tape.add_bias(y, b.get(&format!("{name}.b"))?)
}

pub(crate) fn norm(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, b.get(&format!("{name}.g"))?, b.get(&format!("{name}.b"))?, LN_EPS)
}

pub(crate) fn mlp(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, b, &format!("{name}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, b, &format!("{name}.fc2"), h)
}

/// Projected queries, keys and values of `x` (keys and values from `mem`).
pub(crate) fn qkv(tape: &mut Tape, b: &Bound, name: &str, x: Var, mem: Var) -> Result<(Var, Var, Var)> {
    Ok((
        linear(tape, b, &format!("{name}.q"), x)?,
        linear(tape, b, &format!("{name}.k"), mem)?,
        linear(tape, b, &format!("{name}.v"), mem)?,
    ))
}

pub(crate) fn attend(tape: &mut Tape, b: &Bound, name: &str, x: Var, mem: Var) -> Result<Var> {
    let (q, k, v) = qkv(tape, b, name, x, mem)?;
    let a = tape.attention(q, k, v)?;
    linear(tape, b, &format!("{name}.o"), a)
}

/// Bilinear resampling matrix `[(H·W) × (h·w)]`, pixel-centre aligned.
pub fn bilinear_matrix(h: usize, w: usize, out_h: usize, out_w: usize) -> Tensor {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut m = vec![0.0; out_h * out_w * h * w];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let row = &mut m[(oy * out_w + ox) * h * w..(oy * out_w + ox + 1) * h * w];
            row[y0 * w + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * w + x1] += (1.0 - fy) * fx;
            row[y1 * w + x0] += fy * (1.0 - fx);
            row[y1 * w + x1] += fy * fx;
        }
    }
    Tensor::new(vec![out_h * out_w, h * w], m).expect("positive dims")
}

/// 2×2 average pooling matrix over an `h × w` grid.
pub fn pool_matrix(h: usize, w: usize) -> Tensor {
    let (ph, pw) = (h / 2, w / 2);
    let mut m = vec![0.0; ph * pw * h * w];
    for y in 0..ph * 2 {
        for x in 0..pw * 2 {
            m[((y / 2) * pw + x / 2) * h * w + y * w + x] = 0.25;
        }
    }
    Tensor::new(vec![ph * pw, h * w], m).expect("grid of at least 2x2")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one_and_identity_at_same_size() {
        let m = bilinear_matrix(4, 4, 32, 32);
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = bilinear_matrix(3, 5, 3, 5);
        for r in 0..15 {
            for c in 0..15 {
                assert_eq!(id.get2(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn pooling_averages_quads() {
        let p = pool_matrix(4, 4);
        assert_eq!(p.shape(), &[4, 16]);
        assert_eq!(p.get2(0, 0), 0.25);
        assert_eq!(p.get2(0, 5), 0.25);
        assert_eq!(p.get2(3, 15), 0.25);
        assert_eq!(p.get2(1, 0), 0.0);
    }
}
