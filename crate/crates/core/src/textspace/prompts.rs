use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mining::{group_mean, OODLabelSet};
use super::space::{encode_rows, encode_vectors, EmbeddingSpace};
use crate::diffcore::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_PROMPT_LEN: usize = 4;
const INIT_NOISE: f64 = 0.02;

pub fn prompt_name(n: usize) -> String {
    format!("prompt.{n}")
}

/// Distance groups of mined labels, their mean embeddings and one learnable
/// `[L_p × d]` prompt per group.
#[derive(Clone, Debug)]
pub struct OODPromptSet {
    pub members: Vec<Vec<String>>,
    pub member_similarities: Vec<Vec<f64>>,
    /// Unit-norm group means, `[N × d]`.
    pub means: Tensor,
    /// Entries `prompt.0 … prompt.{N-1}`.
    pub params: ParamSet,
}

impl OODPromptSet {
    /// Each prompt starts as its group mean repeated `prompt_len` times plus small noise.
    pub fn new(ood: &OODLabelSet, groups: &[Vec<usize>], prompt_len: usize, seed: u64) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidArgument("no groups".into()));
        }
        if prompt_len == 0 {
            return Err(Error::InvalidArgument("prompt length must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means = Vec::new();
        let mut params = ParamSet::new();
        for (n, g) in groups.iter().enumerate() {
            let m = group_mean(ood, g)?;
            let p: Vec<f64> = (0..prompt_len)
                .flat_map(|_| m.clone())
                .map(|x| x + INIT_NOISE * rng.sample::<f64, _>(StandardNormal))
                .collect();
            params.insert(prompt_name(n), Tensor::new(vec![prompt_len, m.len()], p)?);
            means.push(m);
        }
        Ok(OODPromptSet {
            members: groups.iter().map(|g| g.iter().map(|&i| ood.labels[i].clone()).collect()).collect(),
            member_similarities: groups.iter().map(|g| g.iter().map(|&i| ood.similarities[i]).collect()).collect(),
            means: Tensor::from_rows(&means)?,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Mean of the group means, renormalized: the single outlier query.
    pub fn pooled_mean(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for r in 0..self.len() {
            for (a, b) in m.iter_mut().zip(self.means.row(r)) {
                *a += b;
            }
        }
        let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::InvalidState("group means cancel".into()));
        }
        Ok(m.iter().map(|x| x / n).collect())
    }

    /// Encoded prompts `[N × d]` with the current parameters.
    pub fn encoded(&self, space: &EmbeddingSpace) -> Result<Tensor> {
        let mut tape = Tape::new();
        let tb = space.params.bind(&mut tape, false);
        let pb = self.params.bind(&mut tape, false);
        let e = encode_prompts(&mut tape, &tb, &pb, self.len())?;
        Ok(tape.value(e).clone())
    }

    pub fn mined_labels(&self) -> MinedLabels {
        let mut labels = Vec::new();
        let mut similarities = Vec::new();
        for (m, s) in self.members.iter().zip(&self.member_similarities) {
            labels.extend(m.iter().cloned());
            similarities.extend(s.iter().copied());
        }
        MinedLabels { labels, similarities, groups: self.members.clone() }
    }
}

/// `mean-pool(P_n) → MLP → normalize` for every prompt, stacked `[N × d]`.
pub fn encode_prompts(tape: &mut Tape, text: &Bound, prompts: &Bound, n: usize) -> Result<Var> {
    let pooled = (0..n)
        .map(|i| {
            let p = prompts.get(&prompt_name(i))?;
            tape.mean_rows(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let x = tape.concat_rows(&pooled)?;
    encode_vectors(tape, text, x)
}

/// Two cross-entropy terms over columns `[group means ; frozen ID embeddings]`:
/// trainable ID embedding `i` should pick its own frozen column, prompt `n` its group.
pub fn prompt_alignment_loss_on_tape(
    tape: &mut Tape,
    space: &EmbeddingSpace,
    text: &Bound,
    prompts: &OODPromptSet,
    prompt_vars: &Bound,
    id_labels: &[&str],
) -> Result<Var> {
    let (a, b) = alignment_terms(tape, space, text, prompts, prompt_vars, id_labels)?;
    tape.add(a, b)
}

fn alignment_terms(
    tape: &mut Tape,
    space: &EmbeddingSpace,
    text: &Bound,
    prompts: &OODPromptSet,
    prompt_vars: &Bound,
    id_labels: &[&str],
) -> Result<(Var, Var)> {
    if id_labels.is_empty() {
        return Err(Error::InvalidArgument("no ID labels".into()));
    }
    if prompts.dim() != space.dim() {
        return Err(Error::Dimension(format!(
            "prompt width {} vs text width {}",
            prompts.dim(),
            space.dim()
        )));
    }
    let n = prompts.len();
    let rows = id_labels.iter().map(|t| space.resolve(t)).collect::<Result<Vec<_>>>()?;
    let id_frozen = space.encode_many(id_labels, true)?;
    let id_now = encode_rows(tape, text, &rows)?;

    let mut cols = prompts.means.data().to_vec();
    cols.extend_from_slice(id_frozen.data());
    let columns = tape.constant(Tensor::new(vec![n + id_labels.len(), space.dim()], cols)?);

    let id_logits = tape.matmul_bt(id_now, columns)?;
    let id_targets: Vec<usize> = (0..id_labels.len()).map(|i| n + i).collect();
    let id_term = tape.cross_entropy(id_logits, &id_targets)?;

    let enc = encode_prompts(tape, text, prompt_vars, n)?;
    let p_logits = tape.matmul_bt(enc, columns)?;
    let p_targets: Vec<usize> = (0..n).collect();
    let p_term = tape.cross_entropy(p_logits, &p_targets)?;
    Ok((id_term, p_term))
}

/// The ID-side and prompt-side terms separately.
pub fn prompt_alignment_terms(space: &EmbeddingSpace, prompts: &OODPromptSet, id_labels: &[&str]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let tb = space.params.bind(&mut tape, false);
    let pb = prompts.params.bind(&mut tape, false);
    let (a, b) = alignment_terms(&mut tape, space, &tb, prompts, &pb, id_labels)?;
    Ok((tape.value(a).item(), tape.value(b).item()))
}

pub fn prompt_alignment_loss(space: &EmbeddingSpace, prompts: &OODPromptSet, id_labels: &[&str]) -> Result<f64> {
    let mut tape = Tape::new();
    let tb = space.params.bind(&mut tape, false);
    let pb = prompts.params.bind(&mut tape, false);
    let l = prompt_alignment_loss_on_tape(&mut tape, space, &tb, prompts, &pb, id_labels)?;
    Ok(tape.value(l).item())
}

/// Plain gradient descent on the prompt vectors alone; returns the loss before each step.
pub fn train_prompts(
    space: &EmbeddingSpace,
    prompts: &mut OODPromptSet,
    id_labels: &[&str],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let tb = space.params.bind(&mut tape, false);
        let pb = prompts.params.bind(&mut tape, true);
        let l = prompt_alignment_loss_on_tape(&mut tape, space, &tb, prompts, &pb, id_labels)?;
        history.push(tape.value(l).item());
        let g = tape.backward(l)?;
        for ((_, p), gp) in prompts.params.iter_mut().zip(pb.grads(&g)) {
            for (x, d) in p.data_mut().iter_mut().zip(gp.data()) {
                *x -= lr * d;
            }
        }
    }
    Ok(history)
}

/// The exported form of a mined label set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedLabels {
    pub labels: Vec<String>,
    pub similarities: Vec<f64>,
    pub groups: Vec<Vec<String>>,
}
