use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::corpus::Corpus;
use crate::diffcore::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const TABLE: &str = "text.table";
pub const W1: &str = "text.w1";
pub const B1: &str = "text.b1";
pub const W2: &str = "text.w2";
pub const B2: &str = "text.b2";

/// Token table plus a residual MLP, `T(x) = normalize(x + W2·gelu(W1·x + b1) + b2)`,
/// and a frozen copy of both taken at construction.
#[derive(Clone, Debug)]
pub struct EmbeddingSpace {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    /// Trainable side, entries named `text.*`.
    pub params: ParamSet,
    frozen: ParamSet,
}

impl EmbeddingSpace {
    /// `W1` is drawn from `seed`; `W2` starts at zero so both sides agree with
    /// the normalized table rows until training moves them.
    pub fn new(corpus: &Corpus, seed: u64) -> Result<Self> {
        let dim = corpus.dim();
        if dim == 0 {
            return Err(Error::InvalidArgument("empty corpus".into()));
        }
        let v = corpus.len();
        let table = Tensor::new(vec![v, dim], corpus.vectors.concat())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / dim as f64).sqrt();
        let w1: Vec<f64> = (0..dim * dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut params = ParamSet::new();
        params.insert(TABLE, table);
        params.insert(W1, Tensor::new(vec![dim, dim], w1)?);
        params.insert(B1, Tensor::zeros(&[1, dim]));
        params.insert(W2, Tensor::zeros(&[dim, dim]));
        params.insert(B2, Tensor::zeros(&[1, dim]));
        let index = corpus.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(EmbeddingSpace { tokens: corpus.tokens.clone(), index, dim, frozen: params.clone(), params })
    }

    /// Rebuilds a space around previously trained parameters.
    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        for (n, t) in self.frozen.iter() {
            if params.get(n)?.shape() != t.shape() {
                return Err(Error::Dimension(format!("parameter `{n}` changed shape")));
            }
        }
        Ok(EmbeddingSpace { params, ..self.clone() })
    }

    /// Reassembles a space from its token list and both parameter sets.
    pub fn from_parts(tokens: Vec<String>, params: ParamSet, frozen: ParamSet) -> Result<Self> {
        let table = frozen.get(TABLE)?;
        if table.rows() != tokens.len() {
            return Err(Error::Dimension(format!("{} tokens for a {}-row table", tokens.len(), table.rows())));
        }
        let dim = table.cols();
        for name in [TABLE, W1, B1, W2, B2] {
            let want = frozen.get(name)?.shape();
            if params.get(name)?.shape() != want {
                return Err(Error::Dimension(format!("parameter `{name}` changed shape")));
            }
        }
        if params.len() != 5 || frozen.len() != 5 {
            return Err(Error::Format("text parameters must be exactly the five text.* tensors".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Format("duplicate tokens".into()));
        }
        Ok(EmbeddingSpace { tokens, index, dim, params, frozen })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frozen_params(&self) -> &ParamSet {
        &self.frozen
    }

    pub fn frozen_hash(&self) -> String {
        self.frozen.hash()
    }

    /// Table rows for `token`: itself if known, else its known subtokens
    /// (split on whitespace and underscores).
    pub fn resolve(&self, token: &str) -> Result<Vec<usize>> {
        if let Some(&i) = self.index.get(token) {
            return Ok(vec![i]);
        }
        let parts: Vec<usize> = token
            .split(|c: char| c.is_whitespace() || c == '_')
            .filter_map(|p| self.index.get(p).copied())
            .collect();
        if parts.is_empty() {
            return Err(Error::Vocabulary(token.to_string()));
        }
        Ok(parts)
    }

    fn side(&self, frozen: bool) -> &ParamSet {
        if frozen {
            &self.frozen
        } else {
            &self.params
        }
    }

    /// Unit-norm embedding of one token.
    pub fn encode_text(&self, token: &str, use_frozen: bool) -> Result<Vec<f64>> {
        Ok(self.encode_many(&[token], use_frozen)?.into_data())
    }

    /// `[n × d]` embeddings of several tokens.
    pub fn encode_many(&self, tokens: &[&str], use_frozen: bool) -> Result<Tensor> {
        let rows = tokens.iter().map(|t| self.resolve(t)).collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let b = self.side(use_frozen).bind(&mut tape, false);
        let out = encode_rows(&mut tape, &b, &rows)?;
        Ok(tape.value(out).clone())
    }

    /// Encodes raw `[n × d]` vectors through the MLP.
    pub fn encode_vectors(&self, x: &Tensor, use_frozen: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.side(use_frozen).bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = encode_vectors(&mut tape, &b, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// Looks up and averages subtoken rows, then encodes.
pub fn encode_rows(tape: &mut Tape, b: &Bound, rows: &[Vec<usize>]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("nothing to encode".into()));
    }
    let table = b.get(TABLE)?;
    let flat: Vec<usize> = rows.iter().flatten().copied().collect();
    let gathered = tape.gather_rows(table, &flat)?;
    let x = if flat.len() == rows.len() {
        gathered
    } else {
        let mut avg = vec![0.0; rows.len() * flat.len()];
        let mut col = 0;
        for (r, parts) in rows.iter().enumerate() {
            for _ in parts {
                avg[r * flat.len() + col] = 1.0 / parts.len() as f64;
                col += 1;
            }
        }
        let a = tape.constant(Tensor::new(vec![rows.len(), flat.len()], avg)?);
        tape.matmul(a, gathered)?
    };
    encode_vectors(tape, b, x)
}

/// `normalize(x + gelu(x·W1 + b1)·W2 + b2)` row-wise.
pub fn encode_vectors(tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
    let h = tape.matmul(x, b.get(W1)?)?;
    let h = tape.add_bias(h, b.get(B1)?)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, b.get(W2)?)?;
    let h = tape.add_bias(h, b.get(B2)?)?;
    let y = tape.add(x, h)?;
    tape.normalize_rows(y)
}
