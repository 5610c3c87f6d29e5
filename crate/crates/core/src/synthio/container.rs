use std::path::Path;

use super::{LabeledScene, CHANNELS};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"TDSC1";

/// A scene list plus the header fields stored with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Hash of the configuration that produced the scenes.
    pub config_hash: String,
    pub scenes: Vec<LabeledScene>,
}

impl Dataset {
    pub fn new(classes: usize, config_hash: impl Into<String>, scenes: Vec<LabeledScene>) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset needs at least one scene".into()))?;
        let (height, width) = (first.height, first.width);
        for s in &scenes {
            if (s.height, s.width) != (height, width)
                || s.image.len() != height * width * CHANNELS
                || s.class_map.len() != height * width
                || s.ood_mask.len() != height * width
            {
                return Err(Error::Dimension("scenes in one dataset must share a shape".into()));
            }
        }
        Ok(Dataset { height, width, classes, config_hash: config_hash.into(), scenes })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u64(self.scenes.len() as u64);
        w.u32(self.height as u32);
        w.u32(self.width as u32);
        w.u32(CHANNELS as u32);
        w.u32(self.classes as u32);
        w.str(&self.config_hash);
        for s in &self.scenes {
            w.f64s(&s.image);
            w.bytes(&s.class_map);
            w.bytes(&s.ood_mask.iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC, "scene container")?;
        let count = r.u64()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let classes = r.u32()? as usize;
        if channels != CHANNELS {
            return Err(Error::Format(format!("{channels} channels, expected {CHANNELS}")));
        }
        let config_hash = r.str()?;
        let px = height * width;
        let per_scene = px * (CHANNELS * 8 + 2);
        if count.saturating_mul(per_scene) > data.len() {
            return Err(r.corrupt(&format!("header claims {count} scenes, file too short")));
        }
        let mut scenes = Vec::with_capacity(count);
        for _ in 0..count {
            let image = r.f64s(px * CHANNELS)?;
            let class_map = r.take(px)?.to_vec();
            let ood_mask = r
                .take(px)?
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(r_corrupt_mask()),
                })
                .collect::<Result<Vec<_>>>()?;
            if class_map.iter().any(|&c| c as usize > classes) {
                return Err(Error::Corruption("class index beyond header class count".into()));
            }
            scenes.push(LabeledScene { height, width, image, class_map, ood_mask });
        }
        r.finish()?;
        Ok(Dataset { height, width, classes, config_hash, scenes })
    }
}

fn r_corrupt_mask() -> Error {
    Error::Corruption("scene container: mask byte other than 0/1".into())
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    std::fs::write(path.as_ref(), ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let data = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    Dataset::from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthio::{generate, SceneRecipe};

    fn sample(n: usize) -> Dataset {
        Dataset::new(4, "abc123", generate(&SceneRecipe::train_default(1), n).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ds = sample(10);
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = sample(1).to_bytes();
        bytes[4] = b'9';
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample(2).to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            assert!(matches!(Dataset::from_bytes(&bytes[..cut]), Err(Error::Corruption(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Dataset::from_bytes(&extra), Err(Error::Corruption(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tdsc");
        let ds = sample(3);
        save_dataset(&p, &ds).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
        assert!(matches!(load_dataset(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
