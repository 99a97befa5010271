//! On-disk dataset: `manifest.json` plus one `VCT1` file per image and mask.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scene::{Sample, SceneConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub image: String,
    pub masks: Vec<String>,
    pub categories: Vec<usize>,
    pub sounding: Vec<bool>,
    pub presence: Vec<bool>,
    pub frame_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub samples: Vec<SampleEntry>,
}

/// A loaded dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub scene: SceneConfig,
    pub samples: Vec<Sample>,
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let image = format!("s{i:05}_image.vct");
        write_tensor(&dir.join(&image), &s.image)?;
        let mut masks = Vec::with_capacity(s.masks.len());
        for (j, m) in s.masks.iter().enumerate() {
            let name = format!("s{i:05}_mask{j}.vct");
            write_tensor(&dir.join(&name), m)?;
            masks.push(name);
        }
        entries.push(SampleEntry {
            image,
            masks,
            categories: s.categories.clone(),
            sounding: s.sounding.clone(),
            presence: s.presence.clone(),
            frame_index: s.frame_index,
        });
    }
    let manifest = Manifest {
        count: entries.len(),
        seed: dataset.seed,
        scene: dataset.scene.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let cfg = &manifest.scene;
    cfg.validate()?;
    if manifest.count != manifest.samples.len() {
        return Err(Error::validation(format!(
            "manifest declares {} samples but lists {}",
            manifest.count,
            manifest.samples.len()
        )));
    }
    let (h, w, k) = (cfg.height, cfg.width, cfg.num_categories);
    let mut samples = Vec::with_capacity(manifest.count);
    for (i, e) in manifest.samples.iter().enumerate() {
        let bad = |msg: String| Error::validation(format!("sample {i}: {msg}"));
        if e.masks.len() != e.categories.len() || e.masks.len() != e.sounding.len() {
            return Err(bad(format!(
                "{} masks, {} categories, {} sounding flags",
                e.masks.len(),
                e.categories.len(),
                e.sounding.len()
            )));
        }
        if e.presence.len() != k {
            return Err(bad(format!("presence has {} entries, expected {k}", e.presence.len())));
        }
        if let Some(&c) = e.categories.iter().find(|&&c| c >= k) {
            return Err(bad(format!("category {c} out of range for K = {k}")));
        }
        for (&c, &s) in e.categories.iter().zip(&e.sounding) {
            if s && !e.presence[c] {
                return Err(bad(format!("sounding category {c} missing from presence")));
            }
        }
        let image = read_tensor::<f32>(&dir.join(&e.image))?;
        if image.dims() != [h, w, 3] {
            return Err(bad(format!("{}: image dims {:?}, expected [{h}, {w}, 3]", e.image, image.dims())));
        }
        let mut masks = Vec::with_capacity(e.masks.len());
        let mut cover = vec![false; h * w];
        for name in &e.masks {
            let m = read_tensor::<f32>(&dir.join(name))?;
            if m.dims() != [h, w] {
                return Err(bad(format!("{name}: mask dims {:?}, expected [{h}, {w}]", m.dims())));
            }
            for (p, &v) in m.data().iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(bad(format!("{name}: mask value {v} is not binary")));
                }
                if v == 1.0 {
                    if cover[p] {
                        return Err(bad(format!("{name}: overlaps another mask")));
                    }
                    cover[p] = true;
                }
            }
            masks.push(m);
        }
        samples.push(Sample {
            image,
            masks,
            categories: e.categories.clone(),
            sounding: e.sounding.clone(),
            presence: e.presence.clone(),
            frame_index: e.frame_index,
        });
    }
    Ok(Dataset { seed: manifest.seed, scene: manifest.scene, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::generate_dataset;

    fn dataset(count: usize) -> Dataset {
        let scene = SceneConfig::default();
        Dataset { seed: 42, samples: generate_dataset(&scene, count, 42).unwrap(), scene }
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(5);
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert!(a.image.bit_eq(&b.image));
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(0);
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert!(back.samples.is_empty());
        assert_eq!(read_manifest(dir.path()).unwrap().count, 0);
    }

    #[test]
    fn truncated_tensor_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(2), dir.path()).unwrap();
        let path = dir.path().join("s00001_image.vct");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        assert!(err.to_string().contains("s00001_image.vct"));
    }

    #[test]
    fn missing_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(1), dir.path()).unwrap();
        fs::remove_file(dir.path().join("s00000_mask0.vct")).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("s00000_mask0.vct"));
    }

    #[test]
    fn manifest_mismatch_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(2), dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.count = 3;
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Validation(_))));
    }
}
