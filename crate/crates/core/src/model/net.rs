use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{attend, bilinear_matrix, linear, mlp, norm, pool_matrix, qkv, Init};
use crate::diffcore::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::saa::{saa_attention, SaaConfig, TokenMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub dec_depth: usize,
    pub text_dim: usize,
    pub pixel_dim: usize,
    /// Full-resolution mask logits from a 3×3 pixel stem; off gives feature-resolution logits.
    pub pixel_stem: bool,
    pub pixel_scales: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            dim: 64,
            depth: 4,
            mlp_ratio: 2,
            dec_depth: 2,
            text_dim: 32,
            pixel_dim: 32,
            pixel_stem: true,
            pixel_scales: 1,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Spatial size of the mask logits.
    pub fn mask_size(&self) -> (usize, usize) {
        if self.pixel_stem {
            (self.height, self.width)
        } else {
            self.grid()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.height", self.height),
            ("model.width", self.width),
            ("model.channels", self.channels),
            ("model.patch", self.patch),
            ("model.dim", self.dim),
            ("model.depth", self.depth),
            ("model.mlp_ratio", self.mlp_ratio),
            ("model.text_dim", self.text_dim),
            ("model.pixel_dim", self.pixel_dim),
            ("model.num_classes", self.num_classes),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(dim_err!(
                "{}x{} images do not divide into {}-pixel patches",
                self.height,
                self.width,
                self.patch
            ));
        }
        if !(1..=2).contains(&self.pixel_scales) {
            return Err(Error::Config(format!("model.pixel_scales = {} (1 or 2)", self.pixel_scales)));
        }
        let (gh, gw) = self.grid();
        if self.pixel_scales == 2 && (gh < 2 || gw < 2 || gh % 2 != 0 || gw % 2 != 0) {
            return Err(Error::Config(format!("a {gh}x{gw} token grid cannot be pooled for a second scale")));
        }
        Ok(())
    }
}

/// Noise applied inside the encoder for one training sample.
pub struct Augment<'a> {
    pub cfg: &'a SaaConfig,
    pub layers: &'a [usize],
    pub mask: &'a TokenMask,
    pub r: f64,
    /// One CLS-row noise vector per entry of `layers`.
    pub noise: &'a [Vec<f64>],
}

pub struct ForwardOut {
    /// `[Q × (K+1)]`
    pub class_logits: Var,
    /// `[Q × (H'·W')]`
    pub mask_logits: Var,
    /// `[1 × d]`
    pub f_global: Var,
    /// `[tokens × d]`
    pub f_local: Var,
}

/// Vision encoder, decoders and heads, plus an untouched copy of the encoder.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    frozen: ParamSet,
    upsample: Tensor,
    pool: Option<Tensor>,
    unpool: Option<Tensor>,
}

pub const ENCODER_PREFIX: &str = "enc.";

impl SegNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let mut init = Init { set: &mut set, rng: &mut rng };
        let (d, dt, dp) = (cfg.dim, cfg.text_dim, cfg.pixel_dim);
        let hidden = d * cfg.mlp_ratio;
        let patch_in = cfg.patch * cfg.patch * cfg.channels;

        init.linear("enc.patch", patch_in, d, 1.0);
        init.embedding("enc.cls", 1, d, 0.02);
        init.embedding("enc.pos", 1 + cfg.tokens(), d, 0.02);
        for l in 0..cfg.depth {
            init.norm(&format!("enc.{l}.ln1"), d);
            init.attention(&format!("enc.{l}.attn"), d, d, d);
            init.norm(&format!("enc.{l}.ln2"), d);
            init.linear(&format!("enc.{l}.mlp.fc1"), d, hidden, 1.0);
            init.linear(&format!("enc.{l}.mlp.fc2"), hidden, d, 0.5);
        }
        init.norm("enc.ln_f", d);

        init.linear("vis2txt", d, dt, 1.0);
        init.linear("txt2vis", dt, d, 1.0);

        for s in 0..cfg.pixel_scales {
            init.norm(&format!("pix.{s}.ln_sa"), d);
            init.attention(&format!("pix.{s}.sa"), d, d, d);
            init.norm(&format!("pix.{s}.ln_ca"), d);
            init.attention(&format!("pix.{s}.ca"), d, d, d);
        }
        init.norm("pix.ln", d);
        init.linear("pix.lat", d, dp, 1.0);
        if cfg.pixel_stem {
            init.linear("pix.stem", 9 * cfg.channels, dp, 1.0);
            init.linear("pix.stem2", dp, dp, 1.0);
            init.linear("pix.out", dp, dp, 1.0);
        }

        for l in 0..cfg.dec_depth {
            init.norm(&format!("dec.{l}.ln_ca"), d);
            init.norm(&format!("dec.{l}.ln_mem"), d);
            init.attention(&format!("dec.{l}.ca"), d, d, d);
            init.norm(&format!("dec.{l}.ln_sa"), d);
            init.attention(&format!("dec.{l}.sa"), d, d, d);
            init.norm(&format!("dec.{l}.ln_mlp"), d);
            init.linear(&format!("dec.{l}.mlp.fc1"), d, hidden, 1.0);
            init.linear(&format!("dec.{l}.mlp.fc2"), hidden, d, 0.5);
        }
        init.norm("dec.ln_f", d);
        init.linear_zero("head.cls", d, cfg.num_classes + 1);
        init.linear("head.mask.fc1", d, d, 1.0);
        init.linear_zero("head.mask.fc2", d, dp);

        let mut frozen = ParamSet::new();
        for (n, t) in set.iter().filter(|(n, _)| n.starts_with(ENCODER_PREFIX)) {
            frozen.insert(n, t.clone());
        }
        Self::assemble(cfg, set, frozen)
    }

    /// Rebuilds a network from stored tensors.
    pub fn from_parts(cfg: ModelConfig, params: ParamSet, frozen: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let reference = SegNet::new(cfg.clone(), 0)?;
        for (set, want) in [(&params, &reference.params), (&frozen, &reference.frozen)] {
            if set.len() != want.len() {
                return Err(Error::Format(format!("{} tensors stored, model needs {}", set.len(), want.len())));
            }
            for (n, t) in want.iter() {
                let got = set.get(n).map_err(|_| Error::Format(format!("missing tensor `{n}`")))?;
                if got.shape() != t.shape() {
                    return Err(Error::Format(format!("tensor `{n}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
                }
            }
        }
        Self::assemble(cfg, params, frozen)
    }

    fn assemble(cfg: ModelConfig, params: ParamSet, frozen: ParamSet) -> Result<Self> {
        let (gh, gw) = cfg.grid();
        let (mh, mw) = cfg.mask_size();
        let upsample = bilinear_matrix(gh, gw, mh, mw);
        let (pool, unpool) = if cfg.pixel_scales == 2 {
            (Some(pool_matrix(gh, gw)), Some(bilinear_matrix(gh / 2, gw / 2, gh, gw)))
        } else {
            (None, None)
        };
        Ok(SegNet { cfg, params, frozen, upsample, pool, unpool })
    }

    pub fn frozen(&self) -> &ParamSet {
        &self.frozen
    }

    /// Patch rows `[tokens × (patch²·C)]` from an `H×W×C` image.
    pub fn patchify(&self, image: &[f64]) -> Result<Tensor> {
        let c = &self.cfg;
        if image.len() != c.height * c.width * c.channels {
            return Err(dim_err!(
                "image has {} values, expected {}x{}x{}",
                image.len(),
                c.height,
                c.width,
                c.channels
            ));
        }
        let (gh, gw) = c.grid();
        let p = c.patch;
        let mut out = Vec::with_capacity(image.len());
        for ty in 0..gh {
            for tx in 0..gw {
                for y in ty * p..(ty + 1) * p {
                    let start = (y * c.width + tx * p) * c.channels;
                    out.extend_from_slice(&image[start..start + p * c.channels]);
                }
            }
        }
        Tensor::new(vec![gh * gw, p * p * c.channels], out)
    }

    /// Zero-padded 3×3 neighbourhoods `[(H·W) × 9C]`.
    fn neighbourhoods(&self, image: &[f64]) -> Result<Tensor> {
        let c = &self.cfg;
        let (h, w, ch) = (c.height as i64, c.width as i64, c.channels);
        let mut out = Vec::with_capacity((h * w) as usize * 9 * ch);
        for y in 0..h {
            for x in 0..w {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= h || xx >= w {
                            out.extend(std::iter::repeat_n(0.0, ch));
                        } else {
                            let s = ((yy * w + xx) as usize) * ch;
                            out.extend_from_slice(&image[s..s + ch]);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![(h * w) as usize, 9 * ch], out)
    }

    /// Encoder tokens after the final norm, `[1 + tokens] × d`, row 0 is CLS.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, image: &[f64], aug: Option<&Augment>) -> Result<Var> {
        let patches = tape.constant(self.patchify(image)?);
        let x = linear(tape, b, "enc.patch", patches)?;
        let cls = b.get("enc.cls")?;
        let x = tape.concat_rows(&[cls, x])?;
        let mut x = tape.add(x, b.get("enc.pos")?)?;
        for l in 0..self.cfg.depth {
            let h = norm(tape, b, &format!("enc.{l}.ln1"), x)?;
            let name = format!("enc.{l}.attn");
            let (q, k, v) = qkv(tape, b, &name, h, h)?;
            let noisy = aug.and_then(|a| a.layers.iter().position(|&i| i == l).map(|j| (a, j)));
            let a = match noisy {
                Some((a, j)) => saa_attention(tape, q, k, v, a.mask, a.cfg, a.r, &a.noise[j])?,
                None => tape.attention(q, k, v)?,
            };
            let a = linear(tape, b, &format!("{name}.o"), a)?;
            x = tape.add(x, a)?;
            let h = norm(tape, b, &format!("enc.{l}.ln2"), x)?;
            let m = mlp(tape, b, &format!("enc.{l}.mlp"), h)?;
            x = tape.add(x, m)?;
        }
        norm(tape, b, "enc.ln_f", x)
    }

    /// CLS feature of the frozen encoder, under the same augmentation as the trained branch.
    pub fn frozen_global(&self, image: &[f64], aug: Option<&Augment>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.frozen.bind(&mut tape, false);
        let toks = self.encode(&mut tape, &b, image, aug)?;
        let g = tape.slice_rows(toks, 0, 1)?;
        Ok(tape.value(g).clone())
    }

    /// CLS feature of the trained encoder on a clean image.
    pub fn global(&self, image: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let toks = self.encode(&mut tape, &b, image, None)?;
        let g = tape.slice_rows(toks, 0, 1)?;
        Ok(tape.value(g).clone())
    }

    /// Full forward pass. `queries` are text embeddings `[Q × text_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        queries: Var,
        image: &[f64],
        aug: Option<&Augment>,
    ) -> Result<ForwardOut> {
        let c = &self.cfg;
        match tape.value(queries).shape() {
            [q, dt] if *q > 0 && *dt == c.text_dim => {}
            s => return Err(dim_err!("queries of shape {s:?}, expected [Q x {}]", c.text_dim)),
        }
        let toks = self.encode(tape, b, image, aug)?;
        let n = 1 + c.tokens();
        let f_global = tape.slice_rows(toks, 0, 1)?;
        let f_local = tape.slice_rows(toks, 1, n)?;

        // pixel decoder
        let text = linear(tape, b, "txt2vis", queries)?;
        let mut feats = f_local;
        if let (Some(pool), Some(unpool)) = (&self.pool, &self.unpool) {
            let p = tape.constant(pool.clone());
            let x = tape.matmul(p, f_local)?;
            let x = self.pixel_block(tape, b, 1, x, text)?;
            let u = tape.constant(unpool.clone());
            let up = tape.matmul(u, x)?;
            feats = tape.add(feats, up)?;
        }
        let feats = self.pixel_block(tape, b, 0, feats, text)?;
        let feats_n = norm(tape, b, "pix.ln", feats)?;
        let lat = linear(tape, b, "pix.lat", feats_n)?;
        let pixels = if c.pixel_stem {
            let u = tape.constant(self.upsample.clone());
            let up = tape.matmul(u, lat)?;
            let nb = tape.constant(self.neighbourhoods(image)?);
            let stem = linear(tape, b, "pix.stem", nb)?;
            let stem = tape.gelu(stem);
            let stem = linear(tape, b, "pix.stem2", stem)?;
            let h = tape.add(up, stem)?;
            let h = tape.gelu(h);
            linear(tape, b, "pix.out", h)?
        } else {
            lat
        };

        // transformer decoder over the query set
        let mut qs = text;
        for l in 0..c.dec_depth {
            let h = norm(tape, b, &format!("dec.{l}.ln_ca"), qs)?;
            let mem = norm(tape, b, &format!("dec.{l}.ln_mem"), feats)?;
            let a = attend(tape, b, &format!("dec.{l}.ca"), h, mem)?;
            qs = tape.add(qs, a)?;
            let h = norm(tape, b, &format!("dec.{l}.ln_sa"), qs)?;
            let a = attend(tape, b, &format!("dec.{l}.sa"), h, h)?;
            qs = tape.add(qs, a)?;
            let h = norm(tape, b, &format!("dec.{l}.ln_mlp"), qs)?;
            let m = mlp(tape, b, &format!("dec.{l}.mlp"), h)?;
            qs = tape.add(qs, m)?;
        }
        let qs = norm(tape, b, "dec.ln_f", qs)?;
        let class_logits = linear(tape, b, "head.cls", qs)?;
        let m = mlp(tape, b, "head.mask", qs)?;
        let mask_logits = tape.matmul_bt(m, pixels)?;
        Ok(ForwardOut { class_logits, mask_logits, f_global, f_local })
    }

    fn pixel_block(&self, tape: &mut Tape, b: &Bound, s: usize, x: Var, text: Var) -> Result<Var> {
        let h = norm(tape, b, &format!("pix.{s}.ln_sa"), x)?;
        let a = attend(tape, b, &format!("pix.{s}.sa"), h, h)?;
        let x = tape.add(x, a)?;
        let h = norm(tape, b, &format!("pix.{s}.ln_ca"), x)?;
        let a = attend(tape, b, &format!("pix.{s}.ca"), h, text)?;
        tape.add(x, a)
    }

    /// Resamples `[Q × (h'·w')]` logits to image resolution when they are not already.
    pub fn to_image_resolution(&self, mask_logits: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        if c.pixel_stem {
            return Ok(mask_logits.clone());
        }
        let q = mask_logits.rows();
        let up = bilinear_matrix(c.grid().0, c.grid().1, c.height, c.width);
        let mut tape = Tape::new();
        let m = tape.constant(mask_logits.clone());
        let u = tape.constant(up);
        let out = tape.matmul_bt(m, u)?;
        let t = tape.value(out).clone();
        debug_assert_eq!(t.shape(), &[q, c.height * c.width]);
        Ok(t)
    }
}
