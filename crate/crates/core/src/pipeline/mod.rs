//! End-to-end steps shared by the command-line tool and the test suites:
//! mining, scene generation, model assembly, training and evaluation.

mod ablate;
mod checkpoint;
mod report;

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, AblationAxis, AblationRow, AblationTable, Variant};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use report::{curves_csv, eval_json, losses_csv, metrics_csv, pr_svg, iou_svg, summary_table, EvalReport, ImageRow};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{default_grid, pixel_eval, MetricRow, ObjectAccumulator, ObjectEval, PixelEval};
use crate::model::{LossRecord, SegNet, Segmenter, Trainer};
use crate::scoring::ScoreMap;
use crate::synthio::{generate, Dataset, LabeledScene, SceneRecipe};
use crate::textspace::{group_by_distance, neg_mine, Corpus, EmbeddingSpace, MinedLabels, OODLabelSet, OODPromptSet};

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.corpus == "bundled" {
        Ok(Corpus::bundled())
    } else {
        Corpus::load(&cfg.corpus)
    }
}

/// Mined labels with their distance groups.
#[derive(Clone, Debug)]
pub struct Mined {
    pub ood: OODLabelSet,
    pub groups: Vec<Vec<usize>>,
}

impl Mined {
    pub fn labels(&self) -> MinedLabels {
        MinedLabels {
            labels: self.ood.labels.clone(),
            similarities: self.ood.similarities.clone(),
            groups: self.groups.iter().map(|g| g.iter().map(|&i| self.ood.labels[i].clone()).collect()).collect(),
        }
    }

    /// Group sizes, nearest band last.
    pub fn histogram(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

/// The mined-label file: labels, groups and the producing config's hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedFile {
    pub config_hash: String,
    pub m: usize,
    pub n: usize,
    #[serde(flatten)]
    pub mined: MinedLabels,
}

impl MinedFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// The frozen text space of a run; its randomness does not affect mining.
pub fn text_space(cfg: &RunConfig, corpus: &Corpus) -> Result<EmbeddingSpace> {
    EmbeddingSpace::new(corpus, cfg.seed)
}

pub fn id_labels(cfg: &RunConfig) -> Vec<String> {
    SceneRecipe::train_default(cfg.data.train_seed).classes.into_iter().take(cfg.model.num_classes).collect()
}

pub fn mine(cfg: &RunConfig, corpus: &Corpus) -> Result<Mined> {
    let space = text_space(cfg, corpus)?;
    let ids = id_labels(cfg);
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    let tokens: Vec<&str> = corpus.tokens.iter().map(String::as_str).collect();
    let ood = neg_mine(&space, &ids, &tokens, cfg.mine.labels, cfg.mine.quantile)?;
    let groups = group_by_distance(&ood, cfg.mine.groups, cfg.mine.binning)?;
    Ok(Mined { ood, groups })
}

/// Rebuilds mined labels from a file against the frozen text encoder.
pub fn mined_from_labels(space: &EmbeddingSpace, labels: &MinedLabels) -> Result<Mined> {
    let index: HashMap<&str, usize> = labels.labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    if index.len() != labels.labels.len() || labels.similarities.len() != labels.labels.len() {
        return Err(Error::Format("mined label file has duplicate labels or mismatched similarities".into()));
    }
    let embeddings = labels
        .labels
        .iter()
        .map(|l| space.encode_text(l, true))
        .collect::<Result<Vec<_>>>()?;
    let groups = labels
        .groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|l| index.get(l.as_str()).copied().ok_or_else(|| Error::Format(format!("group member `{l}` is not a mined label"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let covered: usize = groups.iter().map(Vec::len).sum();
    if covered != labels.labels.len() || groups.iter().any(Vec::is_empty) {
        return Err(Error::Format("groups do not partition the mined labels".into()));
    }
    let ood = OODLabelSet { labels: labels.labels.clone(), similarities: labels.similarities.clone(), embeddings };
    Ok(Mined { ood, groups })
}

/// A freshly initialised model for `cfg`.
pub fn build_model(cfg: &RunConfig, corpus: &Corpus, mined: &Mined) -> Result<Segmenter> {
    let space = text_space(cfg, corpus)?;
    let prompts = OODPromptSet::new(&mined.ood, &mined.groups, cfg.prompt_len, cfg.seed)?;
    let net = SegNet::new(cfg.model.clone(), cfg.seed)?;
    Segmenter::new(net, space, prompts, id_labels(cfg), cfg.queries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Config(format!("unknown split `{s}` (train|eval)"))),
        }
    }
}

/// The default recipe of a split at the model's image size.
pub fn recipe(cfg: &RunConfig, split: Split) -> SceneRecipe {
    let base = match split {
        Split::Train => SceneRecipe::train_default(cfg.data.train_seed),
        Split::Eval => SceneRecipe::eval_default(cfg.data.eval_seed),
    };
    SceneRecipe { height: cfg.model.height, width: cfg.model.width, ..base }
}

pub fn generate_dataset(cfg: &RunConfig, recipe: &SceneRecipe, n: usize) -> Result<Dataset> {
    if recipe.num_classes() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "recipe has {} classes, model expects {}",
            recipe.num_classes(),
            cfg.model.num_classes
        )));
    }
    Dataset::new(recipe.num_classes(), cfg.hash(), generate(recipe, n)?)
}

/// A trainer for `model` under the run's training settings.
pub fn trainer(cfg: &RunConfig, model: Segmenter) -> Result<Trainer> {
    Trainer::new(model, cfg.train.clone())
}

/// Builds and trains a model end to end, returning the trainer and loss history.
pub fn train_from_scratch(cfg: &RunConfig, corpus: &Corpus, mined: &Mined, data: &[LabeledScene]) -> Result<(Trainer, Vec<LossRecord>)> {
    let mut t = trainer(cfg, build_model(cfg, corpus, mined)?)?;
    let history = t.fit(data, cfg.train.iterations, |_, _| Ok(()))?;
    Ok((t, history))
}

/// Metrics of a set of score maps against their scenes.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub pixel: PixelEval,
    pub object: ObjectEval,
    pub row: MetricRow,
    pub ood_pixels: usize,
    pub total_pixels: usize,
    pub images: Vec<ImageRow>,
}

impl Evaluation {
    pub fn prevalence(&self) -> f64 {
        self.ood_pixels as f64 / self.total_pixels as f64
    }
}

/// Score maps equal to each scene's outlier indicator.
pub fn ground_truth_maps(data: &Dataset) -> Vec<ScoreMap> {
    data.scenes.iter().map(|s| ScoreMap::from_mask(&s.ood_binary(), data.classes)).collect()
}

pub fn model_maps(model: &Segmenter, data: &Dataset, cfg: &RunConfig) -> Result<Vec<ScoreMap>> {
    if (data.height, data.width) != (model.net.cfg.height, model.net.cfg.width) {
        return Err(Error::Dimension(format!(
            "{}x{} scenes for a {}x{} model",
            data.height, data.width, model.net.cfg.height, model.net.cfg.width
        )));
    }
    data.scenes.par_iter().map(|s| model.score_image(&s.image, cfg.eval.aggregate)).collect()
}

/// Pixel metrics over all pixels pooled, object metrics with counts pooled over images.
pub fn evaluate_maps(maps: &[ScoreMap], data: &Dataset, name: &str, thresholds: usize) -> Result<Evaluation> {
    if maps.len() != data.scenes.len() {
        return Err(Error::Dimension(format!("{} score maps for {} scenes", maps.len(), data.scenes.len())));
    }
    let ood_pixels: usize = data.scenes.iter().map(LabeledScene::ood_pixels).sum();
    if ood_pixels == 0 {
        return Err(Error::UndefinedMetric(format!("dataset `{name}` has no outlier pixels")));
    }
    let grid = default_grid(thresholds);
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.ood_score.iter().copied()).collect();
    let labels: Vec<bool> = data.scenes.iter().flat_map(|s| s.ood_mask.iter().copied()).collect();
    let pixel = pixel_eval(&scores, &labels)?;
    let per_image = maps
        .par_iter()
        .zip(&data.scenes)
        .map(|(m, s)| {
            let mut acc = ObjectAccumulator::new(&grid)?;
            acc.add(m, &s.ood_binary())?;
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = ObjectAccumulator::new(&grid)?;
    for a in &per_image {
        acc.merge(a);
    }
    let object = acc.finish();
    let images = per_image
        .iter()
        .zip(maps.iter().zip(&data.scenes))
        .enumerate()
        .map(|(i, (a, (m, s)))| ImageRow::new(i, a.finish(), m, s))
        .collect();
    Ok(Evaluation {
        row: MetricRow::from_evals(&pixel, &object),
        pixel,
        object,
        ood_pixels,
        total_pixels: labels.len(),
        images,
    })
}

pub fn evaluate(model: &Segmenter, data: &Dataset, cfg: &RunConfig, name: &str) -> Result<Evaluation> {
    evaluate_maps(&model_maps(model, data, cfg)?, data, name, cfg.eval.thresholds)
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests;
