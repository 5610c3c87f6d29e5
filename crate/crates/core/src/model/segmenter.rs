use serde::{Deserialize, Serialize};

use super::layers::linear;
use super::net::{Augment, ForwardOut, SegNet};
use crate::diffcore::{Bound, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::scoring::{score, Aggregate, ScoreMap};
use crate::textspace::{encode_prompts, encode_rows, EmbeddingSpace, OODPromptSet};

/// Which text embeddings act as outlier queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodQueries {
    /// One fixed query: the pooled mean of all group means.
    Single,
    /// One learnable prompt per distance group.
    #[default]
    Prompts,
    /// Prompts followed by the fixed group means.
    PromptsAndMeans,
}

impl std::str::FromStr for OodQueries {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(OodQueries::Single),
            "prompts" => Ok(OodQueries::Prompts),
            "prompts-and-means" => Ok(OodQueries::PromptsAndMeans),
            _ => Err(Error::Config(format!("unknown ood query mode `{s}` (single|prompts|prompts-and-means)"))),
        }
    }
}

impl OodQueries {
    pub fn name(self) -> &'static str {
        match self {
            OodQueries::Single => "single",
            OodQueries::Prompts => "prompts",
            OodQueries::PromptsAndMeans => "prompts-and-means",
        }
    }
}

/// Tape handles of every parameter group.
pub struct Binding {
    pub net: Bound,
    pub text: Bound,
    pub prompts: Bound,
}

/// Network, text space and prompts together.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub net: SegNet,
    pub space: EmbeddingSpace,
    pub prompts: OODPromptSet,
    pub id_labels: Vec<String>,
    pub ood_queries: OodQueries,
    id_rows: Vec<Vec<usize>>,
    pooled: Vec<f64>,
}

/// Outputs of an inference pass, with mask logits at image resolution.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
}

impl Segmenter {
    pub fn new(
        net: SegNet,
        space: EmbeddingSpace,
        prompts: OODPromptSet,
        id_labels: Vec<String>,
        ood_queries: OodQueries,
    ) -> Result<Self> {
        if id_labels.len() != net.cfg.num_classes {
            return Err(dim_err!("{} ID labels for a {}-class head", id_labels.len(), net.cfg.num_classes));
        }
        if space.dim() != net.cfg.text_dim || prompts.dim() != net.cfg.text_dim {
            return Err(dim_err!(
                "text width {} / prompt width {} vs model text width {}",
                space.dim(),
                prompts.dim(),
                net.cfg.text_dim
            ));
        }
        let id_rows = id_labels.iter().map(|l| space.resolve(l)).collect::<Result<Vec<_>>>()?;
        let pooled = prompts.pooled_mean()?;
        Ok(Segmenter { net, space, prompts, id_labels, ood_queries, id_rows, pooled })
    }

    pub fn num_classes(&self) -> usize {
        self.net.cfg.num_classes
    }

    pub fn num_ood_queries(&self) -> usize {
        match self.ood_queries {
            OodQueries::Single => 1,
            OodQueries::Prompts => self.prompts.len(),
            OodQueries::PromptsAndMeans => 2 * self.prompts.len(),
        }
    }

    /// Class of every query: ID query `k` ↦ `k`, outlier queries ↦ `K`.
    pub fn assignment(&self) -> Vec<usize> {
        let k = self.num_classes();
        (0..k).chain(std::iter::repeat_n(k, self.num_ood_queries())).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        Binding {
            net: self.net.params.bind(tape, trainable),
            text: self.space.params.bind(tape, trainable),
            prompts: self.prompts.params.bind(tape, trainable && self.ood_queries != OodQueries::Single),
        }
    }

    /// All queries `[Q × text_dim]` and the ID part alone.
    pub fn queries(&self, tape: &mut Tape, b: &Binding) -> Result<(Var, Var)> {
        let id = encode_rows(tape, &b.text, &self.id_rows)?;
        let ood = match self.ood_queries {
            OodQueries::Single => tape.constant(Tensor::matrix(1, self.pooled.len(), self.pooled.clone())?),
            OodQueries::Prompts => encode_prompts(tape, &b.text, &b.prompts, self.prompts.len())?,
            OodQueries::PromptsAndMeans => {
                let p = encode_prompts(tape, &b.text, &b.prompts, self.prompts.len())?;
                let m = tape.constant(self.prompts.means.clone());
                tape.concat_rows(&[p, m])?
            }
        };
        Ok((tape.concat_rows(&[id, ood])?, id))
    }

    /// Text columns for the local alignment loss: ID embeddings then the pooled outlier mean.
    pub fn alignment_text(&self, tape: &mut Tape, id_text: Var) -> Result<Var> {
        let ood = tape.constant(Tensor::matrix(1, self.pooled.len(), self.pooled.clone())?);
        tape.concat_rows(&[id_text, ood])
    }

    /// Local features projected into the text space.
    pub fn local_text_features(&self, tape: &mut Tape, b: &Binding, f_local: Var) -> Result<Var> {
        linear(tape, &b.net, "vis2txt", f_local)
    }

    /// Forward pass with mask logits brought to image resolution on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        image: &[f64],
        aug: Option<&Augment>,
    ) -> Result<(ForwardOut, Var)> {
        let (queries, id_text) = self.queries(tape, b)?;
        let mut out = self.net.forward(tape, &b.net, queries, image, aug)?;
        if !self.net.cfg.pixel_stem {
            let c = &self.net.cfg;
            let (gh, gw) = c.grid();
            let u = tape.constant(super::layers::bilinear_matrix(gh, gw, c.height, c.width));
            out.mask_logits = tape.matmul_bt(out.mask_logits, u)?;
        }
        Ok((out, id_text))
    }

    /// Inference without augmentation.
    pub fn predict(&self, image: &[f64]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let (out, _) = self.forward(&mut tape, &b, image, None)?;
        Ok(Prediction {
            class_logits: tape.value(out.class_logits).clone(),
            mask_logits: tape.value(out.mask_logits).clone(),
        })
    }

    pub fn score_image(&self, image: &[f64], aggregate: Aggregate) -> Result<ScoreMap> {
        let p = self.predict(image)?;
        let c = &self.net.cfg;
        score(
            p.class_logits.data(),
            p.mask_logits.data(),
            &self.assignment(),
            self.num_classes(),
            c.height,
            c.width,
            aggregate,
        )
    }

    /// Hashes of the frozen encoder and the frozen text twin.
    pub fn frozen_hashes(&self) -> (String, String) {
        (self.net.frozen().hash(), self.space.frozen_hash())
    }
}
