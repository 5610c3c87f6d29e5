//! Semantically augmented attention: CLS-row noise whose effect is kept only
//! on tokens inside the ground-truth outlier mask.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::scoring::BinaryMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaaConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub sigma: f64,
    /// The noisy branch is used when the gate draw is below this.
    pub gate_threshold: f64,
    /// `first`, `last`, or a comma list of these and layer indices.
    pub layers: String,
}

impl Default for SaaConfig {
    fn default() -> Self {
        SaaConfig { enabled: true, lambda: 0.1, sigma: 1.0, gate_threshold: 0.5, layers: "first,last".into() }
    }
}

impl SaaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("saa.lambda = {} must be a finite value ≥ 0", self.lambda)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("saa.sigma = {} must be positive", self.sigma)));
        }
        Ok(())
    }

    /// Layer indices named by `layers` for an encoder of `depth` blocks.
    pub fn resolve_layers(&self, depth: usize) -> Result<Vec<usize>> {
        if depth == 0 {
            return Err(Error::Config("encoder has no layers".into()));
        }
        let mut out = Vec::new();
        for part in self.layers.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let i = match part {
                "first" => 0,
                "last" => depth - 1,
                "both" => {
                    out.extend([0, depth - 1]);
                    continue;
                }
                n => n
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("saa.layers: bad entry `{n}`")))?,
            };
            if i >= depth {
                return Err(Error::Config(format!("saa.layers: layer {i} of {depth}")));
            }
            out.push(i);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// `λ·𝒩(0, σ²)` for one CLS row of width `d`.
    pub fn draw_noise(&self, rng: &mut impl Rng, d: usize) -> Vec<f64> {
        (0..d)
            .map(|_| self.lambda * self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Per-token mask over `[CLS, patches…]`, 1.0 on outlier tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask(pub Vec<f64>);

impl TokenMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&m| m != 0.0)
    }
}

/// A patch token is set when any pixel of its patch is; CLS is prepended unset.
pub fn downsample_mask(pixel_mask: &BinaryMask, patch: usize) -> Result<TokenMask> {
    let (h, w) = (pixel_mask.height, pixel_mask.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(dim_err!("{h}x{w} mask is not divisible into {patch}x{patch} patches"));
    }
    let (ph, pw) = (h / patch, w / patch);
    let mut tokens = vec![0.0; 1 + ph * pw];
    for r in 0..h {
        for c in 0..w {
            if pixel_mask.get(r, c) {
                tokens[1 + (r / patch) * pw + c / patch] = 1.0;
            }
        }
    }
    Ok(TokenMask(tokens))
}

/// Attention with the semantic augmentation applied.
///
/// When `r < gate_threshold`, `λ > 0` and the mask is non-empty, the CLS row of
/// queries, keys and values is shifted by `noise` and the resulting attention
/// output replaces the plain one on masked rows. CLS itself always keeps the
/// plain output. Every other case returns plain attention.
pub fn saa_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &TokenMask,
    cfg: &SaaConfig,
    r: f64,
    noise: &[f64],
) -> Result<Var> {
    let (t, d) = match tape.value(q).shape() {
        [t, d] => (*t, *d),
        s => return Err(dim_err!("saa_attention: queries of shape {s:?}")),
    };
    if mask.len() != t {
        return Err(dim_err!("saa_attention: token mask of {} for {t} tokens", mask.len()));
    }
    let origin = tape.attention(q, k, v)?;
    if r >= cfg.gate_threshold || cfg.lambda == 0.0 || !mask.any() {
        return Ok(origin);
    }
    if noise.len() != d {
        return Err(dim_err!("saa_attention: noise width {} for d = {d}", noise.len()));
    }
    let mut delta = vec![0.0; t * d];
    delta[..d].copy_from_slice(noise);
    let delta = tape.constant(Tensor::new(vec![t, d], delta)?);
    let qn = tape.add(q, delta)?;
    let kn = tape.add(k, delta)?;
    let vn = tape.add(v, delta)?;
    let noisy = tape.attention(qn, kn, vn)?;
    let mut m = mask.0.clone();
    m[0] = 0.0;
    tape.row_blend(noisy, origin, &m)
}

/// Value-only form of [`saa_attention`].
pub fn saa_attention_values(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &TokenMask,
    cfg: &SaaConfig,
    r: f64,
    noise: &[f64],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = saa_attention(&mut tape, qv, kv, vv, mask, cfg, r, noise)?;
    Ok(tape.value(out).clone())
}
