use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{loss_backbone_v, loss_backbone_vl, loss_mask2former, scene_targets, token_classes};
use super::net::Augment;
use super::optim::{AdamW, AdamWConfig};
use super::segmenter::{Binding, OodQueries, Segmenter};
use crate::diffcore::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::saa::{downsample_mask, SaaConfig, TokenMask};
use crate::synthio::LabeledScene;
use crate::textspace::prompt_alignment_loss_on_tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub v: f64,
    pub vl: f64,
    pub prompt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 1.0, v: 0.1, vl: 0.1, prompt: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub weights: LossWeights,
    pub saa: SaaConfig,
    pub seed: u64,
    /// Exponent of the polynomial learning-rate decay over `iterations`; 0 keeps it constant.
    pub lr_power: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            optim: AdamWConfig::default(),
            weights: LossWeights::default(),
            saa: SaaConfig::default(),
            seed: 0,
            lr_power: 0.9,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let w = &self.weights;
        for (k, v) in [("loss.w_seg", w.seg), ("loss.w_v", w.v), ("loss.w_vl", w.vl), ("loss.w_prompt", w.prompt)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} = {v} must be a finite value ≥ 0")));
            }
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("optim.lr = {}, optim.weight_decay = {}", o.lr, o.weight_decay)));
        }
        if !(self.lr_power >= 0.0 && self.lr_power.is_finite()) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "optim.lr_power = {}, optim.clip_norm = {} must be ≥ 0",
                self.lr_power, self.clip_norm
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::Config("optim betas must lie in [0,1) and eps be positive".into()));
        }
        self.saa.validate()
    }
}

/// Randomness consumed by one sample of a step.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraw {
    pub index: usize,
    /// Gate draw; the noisy branch runs when it is below the gate threshold.
    pub r: f64,
    /// One noise vector per augmented layer, empty when augmentation is off.
    pub noise: Vec<Vec<f64>>,
}

/// Mean losses of one step, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub seg: f64,
    pub l_v: f64,
    pub l_vl: f64,
    pub prompt: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Per-scene quantities that do not change during training.
#[derive(Clone, Debug)]
pub struct Supervision {
    /// CLS feature of the frozen encoder without augmentation.
    pub frozen_global: Tensor,
    pub token_mask: TokenMask,
    pub token_class: Vec<usize>,
    pub targets: Vec<Option<Vec<f64>>>,
}

impl Supervision {
    pub fn new(model: &Segmenter, scene: &LabeledScene) -> Result<Self> {
        let net = &model.net;
        let k = model.num_classes();
        Ok(Supervision {
            frozen_global: net.frozen_global(&scene.image, None)?,
            token_mask: downsample_mask(&scene.ood_binary(), net.cfg.patch)?,
            token_class: token_classes(scene, net.cfg.patch, k)?,
            targets: scene_targets(scene, k),
        })
    }
}

/// Loss terms of one scene on a tape.
pub struct SceneLoss {
    /// `w_seg·seg + w_v·L_V + w_vl·L_VL`
    pub total: Var,
    pub seg: Var,
    pub l_v: Var,
    pub l_vl: Var,
}

/// Weighted training loss of one scene. The frozen reference passes through
/// the same augmentation as the trained encoder.
pub fn scene_loss(
    tape: &mut Tape,
    model: &Segmenter,
    b: &Binding,
    scene: &LabeledScene,
    sup: &Supervision,
    aug: Option<&Augment>,
    w: &LossWeights,
) -> Result<SceneLoss> {
    let (out, id_text) = model.forward(tape, b, &scene.image, aug)?;
    let seg = loss_mask2former(tape, out.class_logits, out.mask_logits, &model.assignment(), &sup.targets)?.total;

    let reference = match aug {
        Some(a) => model.net.frozen_global(&scene.image, Some(a))?,
        None => sup.frozen_global.clone(),
    };
    let reference = tape.constant(reference);
    let l_v = loss_backbone_v(tape, out.f_global, reference)?;

    let local = model.local_text_features(tape, b, out.f_local)?;
    let text = model.alignment_text(tape, id_text)?;
    let l_vl = loss_backbone_vl(tape, local, text, &sup.token_class)?;

    let terms = [(seg, w.seg), (l_v, w.v), (l_vl, w.vl)].map(|(v, k)| tape.scale(v, k));
    let total = tape.add_all(&terms)?;
    Ok(SceneLoss { total, seg, l_v, l_vl })
}

/// Optimizer and sampling state around a [`Segmenter`].
pub struct Trainer {
    pub model: Segmenter,
    pub cfg: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
    saa_layers: Vec<usize>,
    prepared: Vec<Option<Supervision>>,
}

/// Sampling stream of the trainer's generator.
pub const TRAIN_STREAM: u64 = 7;

impl Trainer {
    pub fn new(model: Segmenter, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let saa_layers = cfg.saa.resolve_layers(model.net.cfg.depth)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        let opt = AdamW::new(cfg.optim.clone());
        Ok(Trainer { model, cfg, opt, rng, step: 0, saa_layers, prepared: Vec::new() })
    }

    /// Steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// Position of the sampling generator, as `(seed, stream, word position)`.
    pub fn rng_state(&self) -> (u64, u64, u128) {
        (self.cfg.seed, self.rng.get_stream(), self.rng.get_word_pos())
    }

    /// Draws batch indices and augmentation for the next step.
    pub fn draw(&mut self, dataset_len: usize) -> Result<Vec<SampleDraw>> {
        if dataset_len == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let d = self.model.net.cfg.dim;
        let indices: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..dataset_len)).collect();
        Ok(indices
            .into_iter()
            .map(|index| {
                let (r, noise) = if self.cfg.saa.enabled {
                    let r = self.rng.random::<f64>();
                    let noise = self.saa_layers.iter().map(|_| self.cfg.saa.draw_noise(&mut self.rng, d)).collect();
                    (r, noise)
                } else {
                    (1.0, Vec::new())
                };
                SampleDraw { index, r, noise }
            })
            .collect())
    }

    fn prepare(&mut self, data: &[LabeledScene], draws: &[SampleDraw]) -> Result<()> {
        if self.prepared.len() != data.len() {
            self.prepared = vec![None; data.len()];
        }
        let missing: Vec<usize> = {
            let mut m: Vec<usize> = draws.iter().map(|d| d.index).filter(|&i| self.prepared[i].is_none()).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        let built = missing
            .par_iter()
            .map(|&i| Supervision::new(&self.model, &data[i]))
            .collect::<Result<Vec<_>>>()?;
        for (i, p) in missing.into_iter().zip(built) {
            self.prepared[i] = Some(p);
        }
        Ok(())
    }

    /// Draws a batch from `data` and takes one step.
    pub fn step(&mut self, data: &[LabeledScene]) -> Result<LossRecord> {
        let draws = self.draw(data.len())?;
        self.train_step(data, &draws)
    }

    /// One optimizer step on the scenes named by `draws`.
    ///
    /// On divergence the parameters are left as they were before the step.
    pub fn train_step(&mut self, data: &[LabeledScene], draws: &[SampleDraw]) -> Result<LossRecord> {
        if draws.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(d) = draws.iter().find(|d| d.index >= data.len()) {
            return Err(Error::Index(format!("scene {} of {}", d.index, data.len())));
        }
        self.prepare(data, draws)?;
        let scale = 1.0 / draws.len() as f64;
        let samples = draws
            .par_iter()
            .map(|d| self.sample_grads(&data[d.index], self.prepared[d.index].as_ref().unwrap(), d, scale))
            .collect::<Result<Vec<_>>>()?;

        let model = &self.model;
        let mut net_g = zeros_like(&model.net.params);
        let mut text_g = zeros_like(&model.space.params);
        let mut prompt_g = zeros_like(&model.prompts.params);
        let mut rec = LossRecord { step: self.step, ..Default::default() };
        for s in &samples {
            accumulate(&mut net_g, &s.net);
            accumulate(&mut text_g, &s.text);
            accumulate(&mut prompt_g, &s.prompts);
            rec.seg += s.seg * scale;
            rec.l_v += s.l_v * scale;
            rec.l_vl += s.l_vl * scale;
        }
        let w = &self.cfg.weights;
        if model.ood_queries != OodQueries::Single && w.prompt > 0.0 {
            let mut tape = Tape::new();
            let tb = model.space.params.bind(&mut tape, true);
            let pb = model.prompts.params.bind(&mut tape, true);
            let ids: Vec<&str> = model.id_labels.iter().map(String::as_str).collect();
            let l = prompt_alignment_loss_on_tape(&mut tape, &model.space, &tb, &model.prompts, &pb, &ids)?;
            rec.prompt = tape.value(l).item();
            let weighted = tape.scale(l, w.prompt);
            let g = tape.backward(weighted)?;
            accumulate(&mut text_g, &tb.grads(&g));
            accumulate(&mut prompt_g, &pb.grads(&g));
        }
        rec.total = w.seg * rec.seg + w.v * rec.l_v + w.vl * rec.l_vl + w.prompt * rec.prompt;

        let losses = [("total", rec.total), ("seg", rec.seg), ("L_V", rec.l_v), ("L_VL", rec.l_vl), ("prompt", rec.prompt)];
        if let Some((name, v)) = losses.iter().find(|(_, v)| !v.is_finite()) {
            return Err(self.divergence(format!("{name} loss is {v}; {}", describe(&rec))));
        }
        for (set, grads) in [(&model.net.params, &net_g), (&model.space.params, &text_g), (&model.prompts.params, &prompt_g)] {
            if let Some((name, _)) = set.names().zip(grads).find(|(_, g)| g.data().iter().any(|x| !x.is_finite())) {
                return Err(self.divergence(format!("non-finite gradient for `{name}`; {}", describe(&rec))));
            }
        }

        let norm = [&net_g, &text_g, &prompt_g]
            .iter()
            .flat_map(|g| g.iter())
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            let k = self.cfg.clip_norm / norm;
            for g in net_g.iter_mut().chain(text_g.iter_mut()).chain(prompt_g.iter_mut()) {
                g.data_mut().iter_mut().for_each(|x| *x *= k);
            }
        }
        rec.grad_norm = norm;
        self.opt.cfg.lr = self.lr_at(self.step);
        self.opt.begin_step();
        self.opt.update(&mut self.model.net.params, &net_g)?;
        self.opt.update(&mut self.model.space.params, &text_g)?;
        if self.model.ood_queries != OodQueries::Single {
            self.opt.update(&mut self.model.prompts.params, &prompt_g)?;
        }
        self.step += 1;
        Ok(rec)
    }

    /// Learning rate used by step `step` (zero-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.cfg.optim.lr;
        if self.cfg.lr_power == 0.0 || self.cfg.iterations == 0 {
            return base;
        }
        let frac = (step as f64 / self.cfg.iterations as f64).min(1.0);
        base * (1.0 - frac).powf(self.cfg.lr_power)
    }

    fn divergence(&self, detail: String) -> Error {
        Error::Divergence { step: self.step, detail }
    }

    fn sample_grads(&self, scene: &LabeledScene, prep: &Supervision, draw: &SampleDraw, scale: f64) -> Result<SampleGrads> {
        let model = &self.model;
        let w = &self.cfg.weights;
        let noisy = self.cfg.saa.enabled
            && draw.r < self.cfg.saa.gate_threshold
            && self.cfg.saa.lambda > 0.0
            && prep.token_mask.any()
            && !self.saa_layers.is_empty();
        let aug = noisy.then(|| Augment {
            cfg: &self.cfg.saa,
            layers: &self.saa_layers,
            mask: &prep.token_mask,
            r: draw.r,
            noise: &draw.noise,
        });

        let mut tape = Tape::new();
        let b = model.bind(&mut tape, true);
        let parts = scene_loss(&mut tape, model, &b, scene, prep, aug.as_ref(), w)?;
        let total = tape.scale(parts.total, scale);
        let g = tape.backward(total)?;
        Ok(SampleGrads {
            seg: tape.value(parts.seg).item(),
            l_v: tape.value(parts.l_v).item(),
            l_vl: tape.value(parts.l_vl).item(),
            net: b.net.grads(&g),
            text: b.text.grads(&g),
            prompts: b.prompts.grads(&g),
        })
    }

    /// Runs `iterations` steps, calling `on_step` after each.
    pub fn fit(
        &mut self,
        data: &[LabeledScene],
        iterations: usize,
        mut on_step: impl FnMut(&Trainer, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut history = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let rec = self.step(data)?;
            on_step(self, &rec)?;
            history.push(rec);
        }
        Ok(history)
    }
}

struct SampleGrads {
    seg: f64,
    l_v: f64,
    l_vl: f64,
    net: Vec<Tensor>,
    text: Vec<Tensor>,
    prompts: Vec<Tensor>,
}

fn zeros_like(set: &ParamSet) -> Vec<Tensor> {
    set.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
}

fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

fn describe(r: &LossRecord) -> String {
    format!("seg={} L_V={} L_VL={} prompt={}", r.seg, r.l_v, r.l_vl, r.prompt)
}
