//! `TDOS1` checkpoint container.
//!
//! Layout: magic, config hash, config text, metadata JSON, then the named
//! parameter sets (`net`, `net_frozen`, `text`, `text_frozen`, `prompts`)
//! and the prompt group means. Each set is a tensor count followed by
//! `name, ndim, dims…, values…` records; all integers little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::config::RunConfig;
use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::model::{OodQueries, SegNet, Segmenter, Trainer};
use crate::textspace::{EmbeddingSpace, OODPromptSet};

const MAGIC: &[u8] = b"TDOS1";
const SETS: [&str; 5] = ["net", "net_frozen", "text", "text_frozen", "prompts"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub rng_seed: u64,
    pub rng_stream: u64,
    /// Word position of the sampling generator, decimal.
    pub rng_word_pos: String,
    pub tokens: Vec<String>,
    pub id_labels: Vec<String>,
    pub ood_queries: OodQueries,
    pub members: Vec<Vec<String>>,
    pub member_similarities: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub meta: CheckpointMeta,
    pub sets: Vec<(String, ParamSet)>,
    pub prompt_means: Tensor,
}

impl Checkpoint {
    /// Snapshot of a model; `rng` is `(seed, stream, word position)`.
    pub fn capture(cfg: &RunConfig, model: &Segmenter, step: usize, rng: (u64, u64, u128)) -> Self {
        let meta = CheckpointMeta {
            step,
            rng_seed: rng.0,
            rng_stream: rng.1,
            rng_word_pos: rng.2.to_string(),
            tokens: model.space.tokens().to_vec(),
            id_labels: model.id_labels.clone(),
            ood_queries: model.ood_queries,
            members: model.prompts.members.clone(),
            member_similarities: model.prompts.member_similarities.clone(),
        };
        let sets = vec![
            ("net".to_string(), model.net.params.clone()),
            ("net_frozen".to_string(), model.net.frozen().clone()),
            ("text".to_string(), model.space.params.clone()),
            ("text_frozen".to_string(), model.space.frozen_params().clone()),
            ("prompts".to_string(), model.prompts.params.clone()),
        ];
        Checkpoint {
            config_hash: cfg.hash(),
            config_text: cfg.to_text(),
            meta,
            sets,
            prompt_means: model.prompts.means.clone(),
        }
    }

    pub fn from_trainer(cfg: &RunConfig, t: &Trainer) -> Self {
        Checkpoint::capture(cfg, &t.model, t.steps(), t.rng_state())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC);
        w.str(&self.config_hash);
        w.str(&self.config_text);
        w.str(&serde_json::to_string(&self.meta)?);
        w.u32(self.sets.len() as u32);
        for (name, set) in &self.sets {
            w.str(name);
            w.u32(set.len() as u32);
            for (n, t) in set.iter() {
                w.str(n);
                write_tensor(&mut w, t);
            }
        }
        write_tensor(&mut w, &self.prompt_means);
        Ok(w.buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC, "checkpoint")?;
        let config_hash = r.str()?;
        let config_text = r.str()?;
        let meta: CheckpointMeta =
            serde_json::from_str(&r.str()?).map_err(|e| r.corrupt(&format!("metadata: {e}")))?;
        let n_sets = r.u32()? as usize;
        if n_sets != SETS.len() {
            return Err(r.corrupt(&format!("{n_sets} parameter sets, expected {}", SETS.len())));
        }
        let mut sets = Vec::with_capacity(n_sets);
        for want in SETS {
            let name = r.str()?;
            if name != want {
                return Err(r.corrupt(&format!("parameter set `{name}` where `{want}` was expected")));
            }
            let count = r.u32()? as usize;
            let mut set = ParamSet::new();
            for _ in 0..count {
                let n = r.str()?;
                let t = read_tensor(&mut r)?;
                if set.contains(&n) {
                    return Err(r.corrupt(&format!("duplicate tensor `{n}`")));
                }
                set.insert(n, t);
            }
            sets.push((name, set));
        }
        let prompt_means = read_tensor(&mut r)?;
        r.finish()?;
        meta.rng_word_pos.parse::<u128>().map_err(|_| Error::Corruption("checkpoint: bad generator position".into()))?;
        Ok(Checkpoint { config_hash, config_text, meta, sets, prompt_means })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&data)
    }

    /// The echoed run configuration.
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&self.config_text)?;
        if cfg.hash() != self.config_hash {
            return Err(Error::Corruption("checkpoint: config text does not match its hash".into()));
        }
        Ok(cfg)
    }

    fn set(&self, name: &str) -> ParamSet {
        self.sets.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone()).unwrap_or_default()
    }

    /// Rebuilds the model exactly as captured.
    pub fn model(&self) -> Result<Segmenter> {
        let cfg = self.config()?;
        let net = SegNet::from_parts(cfg.model.clone(), self.set("net"), self.set("net_frozen"))?;
        let space = EmbeddingSpace::from_parts(self.meta.tokens.clone(), self.set("text"), self.set("text_frozen"))?;
        let prompts = OODPromptSet {
            members: self.meta.members.clone(),
            member_similarities: self.meta.member_similarities.clone(),
            means: self.prompt_means.clone(),
            params: self.set("prompts"),
        };
        if prompts.means.rows() != prompts.members.len() || prompts.params.len() != prompts.members.len() {
            return Err(Error::Corruption("checkpoint: prompt groups disagree with their means".into()));
        }
        Segmenter::new(net, space, prompts, self.meta.id_labels.clone(), self.meta.ood_queries)
    }
}

fn write_tensor(w: &mut Writer, t: &Tensor) {
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f64s(t.data());
}

fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    let ndim = r.u32()? as usize;
    if ndim > 8 {
        return Err(r.corrupt(&format!("tensor with {ndim} dimensions")));
    }
    let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.corrupt("tensor size overflow"))?;
    let data = r.f64s(n)?;
    Tensor::new(shape, data).map_err(|e| r.corrupt(&e.to_string()))
}
