//! Flat `key = value` run configuration shared by every command.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::{parse, parse_bool, parse_value};
use crate::model::{ModelConfig, OodQueries, TrainConfig};
use crate::scoring::Aggregate;
use crate::textspace::{Binning, DEFAULT_FILTER_QUANTILE, DEFAULT_PROMPT_LEN};

pub const SEED_ENV: &str = "TDOS_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct MineConfig {
    /// Number of mined labels, `M`.
    pub labels: usize,
    pub quantile: f64,
    /// Number of distance groups, `N`.
    pub groups: usize,
    pub binning: Binning,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_n: usize,
    pub eval_n: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub aggregate: Aggregate,
    /// Number of evenly spaced thresholds for the object-level metrics.
    pub thresholds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `bundled` or a path to a corpus file.
    pub corpus: String,
    pub mine: MineConfig,
    pub prompt_len: usize,
    pub queries: OodQueries,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: "bundled".into(),
            mine: MineConfig { labels: 50, quantile: DEFAULT_FILTER_QUANTILE, groups: 5, binning: Binning::EqualWidth },
            prompt_len: DEFAULT_PROMPT_LEN,
            queries: OodQueries::Prompts,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            checkpoint_every: 500,
            data: DataConfig { train_n: 200, eval_n: 50, train_seed: 0, eval_seed: 1 },
            eval: EvalConfig { aggregate: Aggregate::Max, thresholds: 100 },
        }
    }
}

fn binning_name(b: Binning) -> &'static str {
    match b {
        Binning::EqualWidth => "equal-width",
        Binning::EqualCount => "equal-count",
    }
}

fn aggregate_name(a: Aggregate) -> &'static str {
    match a {
        Aggregate::Max => "max",
        Aggregate::Sum => "sum",
    }
}

impl RunConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        vec![
            ("seed", self.seed.to_string()),
            ("corpus", self.corpus.clone()),
            ("mine.m", self.mine.labels.to_string()),
            ("mine.quantile", self.mine.quantile.to_string()),
            ("mine.n", self.mine.groups.to_string()),
            ("mine.binning", binning_name(self.mine.binning).into()),
            ("prompt.len", self.prompt_len.to_string()),
            ("prompt.queries", self.queries.name().into()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.dec_depth", m.dec_depth.to_string()),
            ("model.pixel_dim", m.pixel_dim.to_string()),
            ("model.pixel_stem", m.pixel_stem.to_string()),
            ("model.pixel_scales", m.pixel_scales.to_string()),
            ("loss.w_seg", t.weights.seg.to_string()),
            ("loss.w_v", t.weights.v.to_string()),
            ("loss.w_vl", t.weights.vl.to_string()),
            ("loss.w_prompt", t.weights.prompt.to_string()),
            ("optim.lr", t.optim.lr.to_string()),
            ("optim.weight_decay", t.optim.weight_decay.to_string()),
            ("optim.beta1", t.optim.beta1.to_string()),
            ("optim.beta2", t.optim.beta2.to_string()),
            ("optim.eps", t.optim.eps.to_string()),
            ("optim.lr_power", t.lr_power.to_string()),
            ("optim.clip_norm", t.clip_norm.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("saa.enabled", t.saa.enabled.to_string()),
            ("saa.lambda", t.saa.lambda.to_string()),
            ("saa.sigma", t.saa.sigma.to_string()),
            ("saa.gate_threshold", t.saa.gate_threshold.to_string()),
            ("saa.layers", t.saa.layers.clone()),
            ("data.train_n", self.data.train_n.to_string()),
            ("data.eval_n", self.data.eval_n.to_string()),
            ("data.train_seed", self.data.train_seed.to_string()),
            ("data.eval_seed", self.data.eval_seed.to_string()),
            ("eval.aggregate", aggregate_name(self.eval.aggregate).into()),
            ("eval.thresholds", self.eval.thresholds.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "corpus" => self.corpus = v.to_string(),
            "mine.m" => self.mine.labels = parse_value(key, v)?,
            "mine.quantile" => self.mine.quantile = parse_value(key, v)?,
            "mine.n" => self.mine.groups = parse_value(key, v)?,
            "mine.binning" => self.mine.binning = v.parse()?,
            "prompt.len" => self.prompt_len = parse_value(key, v)?,
            "prompt.queries" => self.queries = v.parse()?,
            "model.height" => m.height = parse_value(key, v)?,
            "model.width" => m.width = parse_value(key, v)?,
            "model.patch" => m.patch = parse_value(key, v)?,
            "model.dim" => m.dim = parse_value(key, v)?,
            "model.depth" => m.depth = parse_value(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse_value(key, v)?,
            "model.dec_depth" => m.dec_depth = parse_value(key, v)?,
            "model.pixel_dim" => m.pixel_dim = parse_value(key, v)?,
            "model.pixel_stem" => m.pixel_stem = parse_bool(key, v)?,
            "model.pixel_scales" => m.pixel_scales = parse_value(key, v)?,
            "loss.w_seg" => t.weights.seg = parse_value(key, v)?,
            "loss.w_v" => t.weights.v = parse_value(key, v)?,
            "loss.w_vl" => t.weights.vl = parse_value(key, v)?,
            "loss.w_prompt" => t.weights.prompt = parse_value(key, v)?,
            "optim.lr" => t.optim.lr = parse_value(key, v)?,
            "optim.weight_decay" => t.optim.weight_decay = parse_value(key, v)?,
            "optim.beta1" => t.optim.beta1 = parse_value(key, v)?,
            "optim.beta2" => t.optim.beta2 = parse_value(key, v)?,
            "optim.eps" => t.optim.eps = parse_value(key, v)?,
            "optim.lr_power" => t.lr_power = parse_value(key, v)?,
            "optim.clip_norm" => t.clip_norm = parse_value(key, v)?,
            "train.iterations" => t.iterations = parse_value(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "saa.enabled" => t.saa.enabled = parse_bool(key, v)?,
            "saa.lambda" => t.saa.lambda = parse_value(key, v)?,
            "saa.sigma" => t.saa.sigma = parse_value(key, v)?,
            "saa.gate_threshold" => t.saa.gate_threshold = parse_value(key, v)?,
            "saa.layers" => t.saa.layers = v.to_string(),
            "data.train_n" => self.data.train_n = parse_value(key, v)?,
            "data.eval_n" => self.data.eval_n = parse_value(key, v)?,
            "data.train_seed" => self.data.train_seed = parse_value(key, v)?,
            "data.eval_seed" => self.data.eval_seed = parse_value(key, v)?,
            "eval.aggregate" => self.eval.aggregate = v.parse()?,
            "eval.thresholds" => self.eval.thresholds = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        self.train.seed = self.seed;
        Ok(())
    }

    /// Applies `key = value` text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Defaults, then the seed from `env_seed`, then the file, then overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(s) = env_seed {
            cfg.set("seed", s).map_err(|_| Error::Config(format!("{SEED_ENV} = `{s}` is not a seed")))?;
        }
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.mine.labels == 0 || self.mine.groups == 0 || self.mine.groups > self.mine.labels {
            return Err(Error::Config(format!(
                "need 0 < mine.n ≤ mine.m, got mine.n = {} and mine.m = {}",
                self.mine.groups, self.mine.labels
            )));
        }
        if !(0.0..1.0).contains(&self.mine.quantile) {
            return Err(Error::Config(format!("mine.quantile = {} outside [0,1)", self.mine.quantile)));
        }
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt.len must be positive".into()));
        }
        if self.data.train_n == 0 || self.data.eval_n == 0 {
            return Err(Error::Config("data.train_n and data.eval_n must be positive".into()));
        }
        if self.eval.thresholds == 0 {
            return Err(Error::Config("eval.thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text: one `key = value` line per key.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// First 12 hex digits of the hash, for file names and headers.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}
