use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 3e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Whether decoupled weight decay applies: weight matrices only, not
/// embeddings, prompts, norms or biases.
pub fn decays(name: &str, t: &Tensor) -> bool {
    t.shape().len() >= 2
        && t.rows() > 1
        && !(name.ends_with(".pos") || name.ends_with(".cls") || name.ends_with(".table") || name.starts_with("prompt."))
}

/// Adam with decoupled weight decay; moments keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once before updating the sets of one step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, set: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != set.len() {
            return Err(dim_err!("{} gradients for {} parameters", grads.len(), set.len()));
        }
        let c = self.cfg.clone();
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((name, p), g) in set.iter_mut().zip(grads) {
            if p.numel() != g.numel() {
                return Err(dim_err!("gradient of `{name}` has {} values for {}", g.numel(), p.numel()));
            }
            let decay = decays(name, p);
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if decay {
                    *x -= c.lr * c.weight_decay * *x;
                }
                *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
