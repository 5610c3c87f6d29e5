use super::kernels as k;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulBt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, b: Var, cols: usize },
    Scale { x: Var, s: f64 },
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows { x: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    NormalizeRows { x: Var, cols: usize, norms: Vec<f64> },
    MeanRows { x: Var, rows: usize, cols: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, cols: usize },
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64>, cols: usize },
    PresenceNll { logits: Var, assigned: Vec<usize>, present: Vec<bool>, probs: Vec<f64>, cols: usize },
    BceLogits { logits: Var, targets: Vec<f64> },
    Dice { pred: Var, gt: Vec<f64>, eps: f64 },
    SquaredL2 { a: Var, b: Var },
    RowBlend { a: Var, b: Var, mask: Vec<f64>, cols: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Built fresh for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn mat_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(dim_err!("{what}: expected a 2-D tensor, got shape {s:?}")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = mat_dims(self.value(a), "matmul lhs")?;
        let (kb, n) = mat_dims(self.value(b), "matmul rhs")?;
        if ka != kb {
            return Err(dim_err!("matmul inner dimensions differ: {m}x{ka} · {kb}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        k::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k: ka, n },
            rg,
        ))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = mat_dims(self.value(a), "matmul_bt lhs")?;
        let (n, kb) = mat_dims(self.value(b), "matmul_bt rhs")?;
        if ka != kb {
            return Err(dim_err!("matmul_bt inner dimensions differ: {m}x{ka} · ({n}x{kb})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        k::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, ka, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulBt { a, b, m, k: ka, n },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(x), "transpose")?;
        let out = k::transpose(self.value(x).data(), rows, cols);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![cols, rows], out),
            Op::Transpose { x, rows, cols },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x[m×n] + b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = mat_dims(self.value(x), "add_bias")?;
        if self.value(b).numel() != cols {
            return Err(dim_err!(
                "add_bias: bias has {} values for {cols} columns",
                self.value(b).numel()
            ));
        }
        let bias = self.value(b).data();
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBias { x, b, cols }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|v| v * s).collect());
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| k::gelu(v)).collect());
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| k::sigmoid(v)).collect());
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(x), "softmax_rows")?;
        let out = k::softmax_rows(self.value(x).data(), rows, cols);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::SoftmaxRows { x, cols }, rg))
    }

    /// Row-wise layer norm with affine `gamma`, `beta` (each of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(x), "layer_norm")?;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(dim_err!("layer_norm: affine parameters must have {cols} values"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + bt[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::LayerNorm { x, gamma, beta, cols, xhat, rstd },
            rg,
        ))
    }

    /// Scale each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(x), "normalize_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let n = k::dot(row, row).sqrt();
            if n == 0.0 {
                return Err(Error::InvalidState("normalize_rows: zero-norm row".into()));
            }
            norms[r] = n;
            for c in 0..cols {
                out[r * cols + c] = row[c] / n;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::NormalizeRows { x, cols, norms },
            rg,
        ))
    }

    /// Column means: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(x), "mean_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; cols];
        for row in xv.chunks_exact(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![1, cols], out), Op::MeanRows { x, rows, cols }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let (_, cols) = mat_dims(self.value(*first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = mat_dims(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(dim_err!("concat_rows: column counts {cols} and {c} differ"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(x), "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::Index(format!("slice_rows {start}..{end} of {rows} rows")));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![end - start, cols], data),
            Op::SliceRows { x, start, cols },
            rg,
        ))
    }

    /// Output row `i` is input row `idx[i]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(x), "gather_rows")?;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index(format!("gather_rows index {i} of {rows} rows")));
            }
            data.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), cols], data),
            Op::GatherRows { x, idx: idx.to_vec(), cols },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::InvalidArgument("add_all of nothing".into()))?;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Mean softmax cross-entropy over the rows of `logits[B×K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, cols) = mat_dims(self.value(logits), "cross_entropy")?;
        if targets.len() != b {
            return Err(dim_err!("cross_entropy: {} targets for {b} rows", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Index(format!("cross_entropy target {t} outside [0, {cols})")));
        }
        let lv = self.value(logits).data();
        let probs = k::softmax_rows(lv, b, cols);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * cols..(r + 1) * cols];
            loss += k::log_sum_exp(row) - row[t];
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, cols },
            rg,
        ))
    }

    /// Summed per-row class loss with a no-object branch: rows flagged present
    /// contribute `-log p[assigned]`, absent rows `-log(1 - p[assigned])`.
    pub fn presence_nll(&mut self, logits: Var, assigned: &[usize], present: &[bool]) -> Result<Var> {
        let (rows, cols) = mat_dims(self.value(logits), "presence_nll")?;
        if assigned.len() != rows || present.len() != rows {
            return Err(dim_err!("presence_nll: targets do not cover {rows} rows"));
        }
        if cols < 2 {
            return Err(Error::InvalidArgument("presence_nll needs at least two classes".into()));
        }
        if let Some(&t) = assigned.iter().find(|&&t| t >= cols) {
            return Err(Error::Index(format!("presence_nll class {t} outside [0, {cols})")));
        }
        let lv = self.value(logits).data();
        let probs = k::softmax_rows(lv, rows, cols);
        let mut loss = 0.0;
        let mut rest = Vec::with_capacity(cols - 1);
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let lse = k::log_sum_exp(row);
            let a = assigned[r];
            if present[r] {
                loss += lse - row[a];
            } else {
                rest.clear();
                rest.extend(row.iter().enumerate().filter(|(j, _)| *j != a).map(|(_, v)| *v));
                loss += lse - k::log_sum_exp(&rest);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::PresenceNll {
                logits,
                assigned: assigned.to_vec(),
                present: present.to_vec(),
                probs,
                cols,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits against targets in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits).data();
        if lv.len() != targets.len() {
            return Err(dim_err!("bce: {} logits vs {} targets", lv.len(), targets.len()));
        }
        let n = lv.len() as f64;
        let loss = lv
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits { logits, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Smoothed Dice loss `1 - (2Σpg + ε)/(Σp + Σg + ε)`. NaN predictions pass through.
    pub fn dice_loss(&mut self, pred: Var, gt: &[f64], eps: f64) -> Result<Var> {
        let pv = self.value(pred).data();
        if pv.len() != gt.len() {
            return Err(dim_err!("dice: {} predictions vs {} targets", pv.len(), gt.len()));
        }
        if let Some(v) = pv.iter().find(|&&v| v < 0.0 || v > 1.0) {
            return Err(Error::InvalidArgument(format!("dice prediction {v} outside [0,1]")));
        }
        if let Some(v) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("dice target {v} is not binary")));
        }
        let inter: f64 = pv.iter().zip(gt).map(|(p, g)| p * g).sum();
        let s: f64 = pv.iter().sum::<f64>() + gt.iter().sum::<f64>();
        let loss = 1.0 - (2.0 * inter + eps) / (s + eps);
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Dice { pred, gt: gt.to_vec(), eps }, rg))
    }

    /// Squared Euclidean distance `Σ(aᵢ − bᵢ)²`.
    pub fn squared_l2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l2_distance")?;
        let d: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(d), Op::SquaredL2 { a, b }, rg))
    }

    /// Row-wise blend `m⊙a + (1−m)⊙b`; rows with `m` exactly 0 or 1 are copied verbatim.
    pub fn row_blend(&mut self, a: Var, b: Var, mask: &[f64]) -> Result<Var> {
        self.same_shape(a, b, "row_blend")?;
        let (rows, cols) = mat_dims(self.value(a), "row_blend")?;
        if mask.len() != rows {
            return Err(dim_err!("row_blend: mask has {} entries for {rows} rows", mask.len()));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(rows * cols);
        for (r, &m) in mask.iter().enumerate() {
            let ar = &av[r * cols..(r + 1) * cols];
            let br = &bv[r * cols..(r + 1) * cols];
            if m == 1.0 {
                out.extend_from_slice(ar);
            } else if m == 0.0 {
                out.extend_from_slice(br);
            } else {
                out.extend(ar.iter().zip(br).map(|(x, y)| m * x + (1.0 - m) * y));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::RowBlend { a, b, mask: mask.to_vec(), cols },
            rg,
        ))
    }

    /// `softmax(q kᵀ / √d)`; rows sum to one.
    pub fn attention_weights(&mut self, q: Var, kk: Var) -> Result<Var> {
        let d = mat_dims(self.value(q), "attention query")?.1;
        let s = self.matmul_bt(q, kk)?;
        let s = self.scale(s, 1.0 / (d as f64).sqrt());
        self.softmax_rows(s)
    }

    /// Scaled dot-product attention `softmax(q kᵀ / √d) v`.
    pub fn attention(&mut self, q: Var, kk: Var, v: Var) -> Result<Var> {
        let (sk, _) = mat_dims(self.value(kk), "attention key")?;
        let (sv, _) = mat_dims(self.value(v), "attention value")?;
        if sk != sv {
            return Err(dim_err!("attention: {sk} keys but {sv} values"));
        }
        let w = self.attention_weights(q, kk)?;
        self.matmul(w, v)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k: kk, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| k::matmul_bt_acc(g, bv, ga, *m, *n, *kk));
                acc(*b, &mut |gb| k::matmul_at_acc(av, g, gb, *m, *kk, *n));
            }
            Op::MatMulBt { a, b, m, k: kk, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // out = a bᵀ: ga = g b, gb = gᵀ a
                acc(*a, &mut |ga| k::matmul_acc(g, bv, ga, *m, *n, *kk));
                acc(*b, &mut |gb| k::matmul_at_acc(g, av, gb, *m, *n, *kk));
            }
            Op::Transpose { x, rows, cols } => {
                let gt = k::transpose(g, *cols, *rows);
                acc(*x, &mut |gx| k::axpy(1.0, &gt, gx));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| k::axpy(1.0, g, ga));
                acc(*b, &mut |gb| k::axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| k::axpy(1.0, g, ga));
                acc(*b, &mut |gb| k::axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddBias { x, b, cols } => {
                acc(*x, &mut |gx| k::axpy(1.0, g, gx));
                acc(*b, &mut |gb| {
                    for row in g.chunks_exact(*cols) {
                        k::axpy(1.0, row, gb);
                    }
                });
            }
            Op::Scale { x, s } => acc(*x, &mut |gx| k::axpy(*s, g, gx)),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for ((o, gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * k::gelu_grad(xi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::SoftmaxRows { x, cols } => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(*cols).zip(g.chunks_exact(*cols)).zip(y.chunks_exact(*cols)) {
                        let s = k::dot(gr, yr);
                        for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
                let gv = self.value(*gamma).data();
                let c = *cols;
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((o, gi), hi) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gi * hi;
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks_exact(c) {
                        k::axpy(1.0, gr, gb);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dh = vec![0.0; c];
                    for (r, (gxr, gr)) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = k::dot(&dh, hr) / c as f64;
                        for j in 0..c {
                            gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, cols, norms } => {
                let y = node.value.data();
                let c = *cols;
                acc(*x, &mut |gx| {
                    for (r, (gxr, gr)) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let s = k::dot(gr, yr);
                        for j in 0..c {
                            gxr[j] += (gr[j] - yr[j] * s) / norms[r];
                        }
                    }
                });
            }
            Op::MeanRows { x, rows, cols } => {
                let inv = 1.0 / *rows as f64;
                acc(*x, &mut |gx| {
                    for gxr in gx.chunks_exact_mut(*cols) {
                        k::axpy(inv, g, gxr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |gp| k::axpy(1.0, &g[off..off + len], gp));
                    off += len;
                }
            }
            Op::SliceRows { x, start, cols } => {
                let off = start * cols;
                acc(*x, &mut |gx| k::axpy(1.0, g, &mut gx[off..off + g.len()]));
            }
            Op::GatherRows { x, idx, cols } => {
                let c = *cols;
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        k::axpy(1.0, &g[r * c..(r + 1) * c], &mut gx[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::CrossEntropy { logits, targets, probs, cols } => {
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * cols..(r + 1) * cols];
                        let pr = &probs[r * cols..(r + 1) * cols];
                        for j in 0..*cols {
                            row[j] += scale * (pr[j] - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::PresenceNll { logits, assigned, present, probs, cols } => {
                let c = *cols;
                acc(*logits, &mut |gl| {
                    for r in 0..assigned.len() {
                        let pr = &probs[r * c..(r + 1) * c];
                        let row = &mut gl[r * c..(r + 1) * c];
                        let a = assigned[r];
                        if present[r] {
                            for j in 0..c {
                                row[j] += g[0] * (pr[j] - if j == a { 1.0 } else { 0.0 });
                            }
                        } else {
                            // d/dz [lse(z) - lse(z without a)] = p - q, q = softmax over j≠a
                            let lv = &self.value(*logits).data()[r * c..(r + 1) * c];
                            let rest: Vec<f64> = lv.iter().enumerate().filter(|(j, _)| *j != a).map(|(_, v)| *v).collect();
                            let lse_rest = k::log_sum_exp(&rest);
                            for j in 0..c {
                                let q = if j == a { 0.0 } else { (lv[j] - lse_rest).exp() };
                                row[j] += g[0] * (pr[j] - q);
                            }
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for ((o, &z), &y) in gl.iter_mut().zip(lv).zip(targets) {
                        *o += scale * (k::sigmoid(z) - y);
                    }
                });
            }
            Op::Dice { pred, gt, eps } => {
                let pv = self.value(*pred).data();
                let inter: f64 = pv.iter().zip(gt).map(|(p, q)| p * q).sum();
                let s: f64 = pv.iter().sum::<f64>() + gt.iter().sum::<f64>();
                let num = 2.0 * inter + eps;
                let den = s + eps;
                acc(*pred, &mut |gp| {
                    for (o, &gi) in gp.iter_mut().zip(gt) {
                        *o += g[0] * -(2.0 * gi * den - num) / (den * den);
                    }
                });
            }
            Op::SquaredL2 { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += g[0] * 2.0 * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= g[0] * 2.0 * (x - y);
                    }
                });
            }
            Op::RowBlend { a, b, mask, cols } => {
                let c = *cols;
                acc(*a, &mut |ga| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m != 0.0 {
                            k::axpy(m, &g[r * c..(r + 1) * c], &mut ga[r * c..(r + 1) * c]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m != 1.0 {
                            k::axpy(1.0 - m, &g[r * c..(r + 1) * c], &mut gb[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
        }
    }
}
