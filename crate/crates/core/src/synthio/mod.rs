//! Synthetic driving-like scenes with pasted outlier objects, and their file container.

mod container;
mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;
use crate::scoring::BinaryMask;

pub use container::{load_dataset, save_dataset, Dataset};
pub use raster::{color, rasterize, Shape, COLORS};

pub const CHANNELS: usize = 3;

/// One image with per-pixel ID classes and the outlier mask.
///
/// `class_map` holds ID classes `0..K`; outlier pixels hold `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub height: usize,
    pub width: usize,
    /// `H × W × C`, values in [0,1].
    pub image: Vec<f64>,
    pub class_map: Vec<u8>,
    pub ood_mask: Vec<bool>,
}

impl LabeledScene {
    pub fn ood_binary(&self) -> BinaryMask {
        BinaryMask { height: self.height, width: self.width, data: self.ood_mask.clone() }
    }

    pub fn ood_pixels(&self) -> usize {
        self.ood_mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdEntry {
    pub class: usize,
    pub shape: Shape,
    pub color: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OodEntry {
    pub shape: Shape,
    pub color: String,
}

/// Which palette entry painted a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Id(usize),
    Ood(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub id_palette: Vec<IdEntry>,
    pub ood_palette: Vec<OodEntry>,
    pub paste_probability: f64,
    /// Inclusive radius range of pasted outliers.
    pub ood_size_range: (i64, i64),
    pub max_ood_objects: usize,
    /// Inclusive radius range of ID objects.
    pub object_size_range: (i64, i64),
    pub noise: f64,
}

pub const DEFAULT_CLASSES: [&str; 4] = ["sky", "road", "car", "person"];
const OOD_COLORS: [&str; 8] = ["magenta", "cyan", "green", "orange", "white", "purple", "black", "brown"];

fn ood_combos(shapes: &[Shape]) -> Vec<OodEntry> {
    shapes
        .iter()
        .flat_map(|&shape| OOD_COLORS.iter().map(move |c| OodEntry { shape, color: c.to_string() }))
        .collect()
}

impl SceneRecipe {
    /// Training scenes: crosses and rings pasted into half of the images.
    pub fn train_default(seed: u64) -> Self {
        SceneRecipe {
            seed,
            height: 32,
            width: 32,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            id_palette: vec![
                IdEntry { class: 0, shape: Shape::Band, color: "skyblue".into() },
                IdEntry { class: 1, shape: Shape::Band, color: "gray".into() },
                IdEntry { class: 2, shape: Shape::Square, color: "red".into() },
                IdEntry { class: 3, shape: Shape::Triangle, color: "yellow".into() },
            ],
            ood_palette: ood_combos(&[Shape::Cross, Shape::Ring]),
            paste_probability: 0.5,
            ood_size_range: (3, 5),
            max_ood_objects: 2,
            object_size_range: (2, 4),
            noise: 0.03,
        }
    }

    /// Evaluation scenes: held-out diamond and disk outliers in every image.
    pub fn eval_default(seed: u64) -> Self {
        SceneRecipe {
            ood_palette: ood_combos(&[Shape::Diamond, Shape::Disk]),
            paste_probability: 1.0,
            ..SceneRecipe::train_default(seed)
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_palette.is_empty() {
            return Err(Error::InvalidArgument("empty ID palette".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("scene size must be positive".into()));
        }
        if self.classes.is_empty() || self.classes.len() >= u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("{} classes", self.classes.len())));
        }
        if !(0.0..=1.0).contains(&self.paste_probability) {
            return Err(Error::InvalidArgument(format!(
                "paste probability {} outside [0,1]",
                self.paste_probability
            )));
        }
        if self.paste_probability > 0.0 && (self.ood_palette.is_empty() || self.max_ood_objects == 0) {
            return Err(Error::InvalidArgument("pasting enabled with no outlier palette".into()));
        }
        for (lo, hi, what) in [
            (self.ood_size_range.0, self.ood_size_range.1, "ood size"),
            (self.object_size_range.0, self.object_size_range.1, "object size"),
        ] {
            if lo < 1 || hi < lo {
                return Err(Error::InvalidArgument(format!("bad {what} range {lo}..={hi}")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise {}", self.noise)));
        }
        if !self.id_palette.iter().any(|e| e.shape == Shape::Band) {
            return Err(Error::InvalidArgument("ID palette needs at least one band class".into()));
        }
        for e in &self.id_palette {
            if e.class >= self.classes.len() {
                return Err(Error::InvalidArgument(format!("palette class {} of {}", e.class, self.classes.len())));
            }
            color(&e.color)?;
        }
        for o in &self.ood_palette {
            color(&o.color)?;
            if o.shape == Shape::Band {
                return Err(Error::InvalidArgument("outliers cannot be bands".into()));
            }
            if self.id_palette.iter().any(|e| e.shape == o.shape && e.color == o.color) {
                return Err(Error::InvalidArgument(format!(
                    "{}:{} is in both palettes",
                    o.shape.name(),
                    o.color
                )));
            }
        }
        Ok(())
    }

    /// Recipe file text; `from_text` reads it back.
    pub fn to_text(&self) -> String {
        let id = self
            .id_palette
            .iter()
            .map(|e| format!("{}:{}:{}", self.classes[e.class], e.shape.name(), e.color))
            .collect::<Vec<_>>()
            .join(", ");
        let ood = self
            .ood_palette
            .iter()
            .map(|e| format!("{}:{}", e.shape.name(), e.color))
            .collect::<Vec<_>>()
            .join(", ");
        format!(
            "seed = {}\nheight = {}\nwidth = {}\nclasses = {}\nid_palette = {id}\nood_palette = {ood}\n\
             paste_probability = {}\nood_size_min = {}\nood_size_max = {}\nmax_ood_objects = {}\n\
             object_size_min = {}\nobject_size_max = {}\nnoise = {}\n",
            self.seed,
            self.height,
            self.width,
            self.classes.join(", "),
            self.paste_probability,
            self.ood_size_range.0,
            self.ood_size_range.1,
            self.max_ood_objects,
            self.object_size_range.0,
            self.object_size_range.1,
            self.noise,
        )
    }

    /// Parses a recipe file; keys not given keep the training defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = SceneRecipe::train_default(0);
        let mut id_spec = None;
        for (k, v) in kv::parse(text)? {
            match k.as_str() {
                "seed" => r.seed = kv::parse_value(&k, &v)?,
                "height" => r.height = kv::parse_value(&k, &v)?,
                "width" => r.width = kv::parse_value(&k, &v)?,
                "classes" => r.classes = split_list(&v).map(String::from).collect(),
                "id_palette" => id_spec = Some(v),
                "ood_palette" => {
                    r.ood_palette = split_list(&v)
                        .map(|item| {
                            let (s, c) = item
                                .split_once(':')
                                .ok_or_else(|| Error::Config(format!("ood entry `{item}` is not shape:colour")))?;
                            Ok(OodEntry { shape: s.parse()?, color: c.to_string() })
                        })
                        .collect::<Result<_>>()?
                }
                "paste_probability" => r.paste_probability = kv::parse_value(&k, &v)?,
                "ood_size_min" => r.ood_size_range.0 = kv::parse_value(&k, &v)?,
                "ood_size_max" => r.ood_size_range.1 = kv::parse_value(&k, &v)?,
                "max_ood_objects" => r.max_ood_objects = kv::parse_value(&k, &v)?,
                "object_size_min" => r.object_size_range.0 = kv::parse_value(&k, &v)?,
                "object_size_max" => r.object_size_range.1 = kv::parse_value(&k, &v)?,
                "noise" => r.noise = kv::parse_value(&k, &v)?,
                _ => return Err(Error::Config(format!("unknown recipe key `{k}`"))),
            }
        }
        if let Some(v) = id_spec {
            r.id_palette = split_list(&v)
                .map(|item| {
                    let parts: Vec<&str> = item.split(':').collect();
                    let [cls, shape, col] = parts[..] else {
                        return Err(Error::Config(format!("id entry `{item}` is not class:shape:colour")));
                    };
                    let class = r
                        .classes
                        .iter()
                        .position(|c| c == cls)
                        .ok_or_else(|| Error::Config(format!("id entry names unknown class `{cls}`")))?;
                    Ok(IdEntry { class, shape: shape.parse()?, color: col.to_string() })
                })
                .collect::<Result<_>>()?;
        }
        r.validate()?;
        Ok(r)
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Generates `n` scenes. Scene `i` draws from its own stream of the recipe seed,
/// so output does not depend on how generation is scheduled.
pub fn generate(recipe: &SceneRecipe, n: usize) -> Result<Vec<LabeledScene>> {
    Ok(generate_tagged(recipe, n)?.into_iter().map(|(s, _)| s).collect())
}

/// As [`generate`], also returning which palette entry painted each pixel.
pub fn generate_tagged(recipe: &SceneRecipe, n: usize) -> Result<Vec<(LabeledScene, Vec<Provenance>)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("scene count must be at least 1".into()));
    }
    recipe.validate()?;
    let id_rgb: Vec<[f64; 3]> = recipe.id_palette.iter().map(|e| color(&e.color)).collect::<Result<_>>()?;
    let ood_rgb: Vec<[f64; 3]> = recipe.ood_palette.iter().map(|e| color(&e.color)).collect::<Result<_>>()?;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
            rng.set_stream(i as u64);
            one_scene(recipe, &id_rgb, &ood_rgb, &mut rng)
        })
        .collect())
}

fn one_scene(
    recipe: &SceneRecipe,
    id_rgb: &[[f64; 3]],
    ood_rgb: &[[f64; 3]],
    rng: &mut ChaCha8Rng,
) -> (LabeledScene, Vec<Provenance>) {
    let (h, w) = (recipe.height, recipe.width);
    let k = recipe.num_classes();
    let mut tags = vec![Provenance::Id(0); h * w];
    let mut class_map = vec![0u8; h * w];
    let mut ood_mask = vec![false; h * w];

    // bands stacked top to bottom in palette order, boundaries jittered
    let bands: Vec<usize> = (0..recipe.id_palette.len())
        .filter(|&j| recipe.id_palette[j].shape == Shape::Band)
        .collect();
    let nb = bands.len();
    let mut edges = vec![0usize];
    for b in 1..nb {
        let nominal = (b * h) as f64 / nb as f64;
        let jitter = 0.15 * h as f64 / nb as f64;
        let e = (nominal + rng.random_range(-jitter..=jitter)).round() as usize;
        edges.push(e.clamp(*edges.last().unwrap(), h));
    }
    edges.push(h);
    for (b, &j) in bands.iter().enumerate() {
        for r in edges[b]..edges[b + 1] {
            for c in 0..w {
                tags[r * w + c] = Provenance::Id(j);
                class_map[r * w + c] = recipe.id_palette[j].class as u8;
            }
        }
    }

    // one or two instances of every object class
    let object_classes: Vec<usize> = {
        let mut v: Vec<usize> = recipe
            .id_palette
            .iter()
            .filter(|e| e.shape != Shape::Band)
            .map(|e| e.class)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    for cls in object_classes {
        let entries: Vec<usize> = (0..recipe.id_palette.len())
            .filter(|&j| recipe.id_palette[j].class == cls && recipe.id_palette[j].shape != Shape::Band)
            .collect();
        for _ in 0..rng.random_range(1..=2) {
            let j = entries[rng.random_range(0..entries.len())];
            let (lo, hi) = recipe.object_size_range;
            let s = rng.random_range(lo..=hi);
            let (cy, cx) = (rng.random_range(0..h as i64), rng.random_range(0..w as i64));
            rasterize(recipe.id_palette[j].shape, cy, cx, s, h, w, |r, c| {
                tags[r * w + c] = Provenance::Id(j);
                class_map[r * w + c] = cls as u8;
            });
        }
    }

    if rng.random_bool(recipe.paste_probability) {
        for _ in 0..rng.random_range(1..=recipe.max_ood_objects) {
            let j = rng.random_range(0..recipe.ood_palette.len());
            let (lo, hi) = recipe.ood_size_range;
            let s = rng.random_range(lo..=hi);
            let (cy, cx) = (rng.random_range(0..h as i64), rng.random_range(0..w as i64));
            rasterize(recipe.ood_palette[j].shape, cy, cx, s, h, w, |r, c| {
                tags[r * w + c] = Provenance::Ood(j);
                class_map[r * w + c] = k as u8;
                ood_mask[r * w + c] = true;
            });
        }
    }

    let noise = Normal::new(0.0, recipe.noise.max(f64::MIN_POSITIVE)).expect("validated noise");
    let mut image = Vec::with_capacity(h * w * CHANNELS);
    for t in &tags {
        let rgb = match *t {
            Provenance::Id(j) => id_rgb[j],
            Provenance::Ood(j) => ood_rgb[j],
        };
        for v in rgb {
            let jitter = if recipe.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            image.push((v + jitter).clamp(0.0, 1.0));
        }
    }
    (LabeledScene { height: h, width: w, image, class_map, ood_mask }, tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_pasting_means_no_outliers() {
        let r = SceneRecipe { paste_probability: 0.0, ..SceneRecipe::train_default(3) };
        assert!(generate(&r, 20).unwrap().iter().all(|s| s.ood_pixels() == 0));
    }

    #[test]
    fn seeded_generation_is_repeatable() {
        let r = SceneRecipe::train_default(11);
        assert_eq!(generate(&r, 8).unwrap(), generate(&r, 8).unwrap());
        let other = SceneRecipe::train_default(12);
        assert_ne!(generate(&r, 8).unwrap(), generate(&other, 8).unwrap());
    }

    #[test]
    fn prefix_independent_of_count() {
        let r = SceneRecipe::eval_default(5);
        let a = generate(&r, 3).unwrap();
        let b = generate(&r, 7).unwrap();
        assert_eq!(a[..], b[..3]);
    }

    #[test]
    fn labels_are_consistent() {
        let r = SceneRecipe::eval_default(2);
        for s in generate(&r, 30).unwrap() {
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
            for (c, &m) in s.class_map.iter().zip(&s.ood_mask) {
                assert_eq!(*c as usize == r.num_classes(), m);
            }
            assert!(s.ood_pixels() > 0);
        }
    }

    #[test]
    fn empty_id_palette_rejected() {
        let r = SceneRecipe { id_palette: vec![], ..SceneRecipe::train_default(0) };
        assert!(matches!(generate(&r, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate(&SceneRecipe::train_default(0), 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shared_combo_rejected() {
        let mut r = SceneRecipe::train_default(0);
        r.ood_palette.push(OodEntry { shape: Shape::Square, color: "red".into() });
        assert!(matches!(r.validate(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn recipe_text_round_trip() {
        for r in [SceneRecipe::train_default(9), SceneRecipe::eval_default(4)] {
            assert_eq!(SceneRecipe::from_text(&r.to_text()).unwrap(), r);
        }
        assert!(matches!(SceneRecipe::from_text("colour = red"), Err(Error::Config(_))));
    }
}
