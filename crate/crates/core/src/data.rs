//! Line-delimited JSON manifests and in-memory image sets.
//!
//! A MOS record is `{"ref": .., "dist": .., "mos": ..}`; a triplet record is
//! `{"ref": .., "dist_a": .., "dist_b": .., "h": ..}` where `h` is the
//! fraction of votes preferring `dist_b`. Relative paths resolve against a
//! root, by default the manifest's directory. Blank lines and lines starting
//! with `#` are skipped.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, ImageTensor};
use crate::parallel::map_indexed;

/// A distorted image with a mean opinion score on a 0–5 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MosSample {
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub mos: f64,
    /// Regression target `1 − mos/5`.
    pub s: f64,
}

/// A reference with two distortions and the preference for `dist_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub ref_path: PathBuf,
    pub dist_a: PathBuf,
    pub dist_b: PathBuf,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    #[serde(rename = "ref")]
    pub reference: String,
    pub dist: String,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    #[serde(rename = "ref")]
    pub reference: String,
    pub dist_a: String,
    pub dist_b: String,
    pub h: f64,
}

/// `s = 1 − mos/5` for `mos ∈ [0, 5]`.
pub fn mos_to_s(mos: f64, record: &str) -> Result<f64> {
    if !(0.0..=5.0).contains(&mos) {
        return Err(Error::Data {
            record: record.into(),
            reason: format!("mos {mos} outside [0, 5]"),
        });
    }
    Ok(1.0 - mos / 5.0)
}

fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<(String, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = format!("{}:{}", path.display(), i + 1);
        let value = serde_json::from_str(line).map_err(|e| Error::Data {
            record: record.clone(),
            reason: e.to_string(),
        })?;
        out.push((record, value));
    }
    Ok(out)
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn root_for(path: &Path, root: Option<&Path>) -> PathBuf {
    root.map(Path::to_path_buf)
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default())
}

pub fn load_mos_manifest(path: impl AsRef<Path>, root: Option<&Path>) -> Result<Vec<MosSample>> {
    let path = path.as_ref();
    let root = root_for(path, root);
    read_records::<MosRecord>(path)?
        .into_iter()
        .map(|(record, r)| {
            Ok(MosSample {
                ref_path: resolve(&root, &r.reference),
                dist_path: resolve(&root, &r.dist),
                s: mos_to_s(r.mos, &record)?,
                mos: r.mos,
            })
        })
        .collect()
}

pub fn load_triplet_manifest(path: impl AsRef<Path>, root: Option<&Path>) -> Result<Vec<TripletSample>> {
    let path = path.as_ref();
    let root = root_for(path, root);
    read_records::<TripletRecord>(path)?
        .into_iter()
        .map(|(record, r)| {
            if !(0.0..=1.0).contains(&r.h) {
                return Err(Error::Data {
                    record,
                    reason: format!("h {} outside [0, 1]", r.h),
                });
            }
            Ok(TripletSample {
                ref_path: resolve(&root, &r.reference),
                dist_a: resolve(&root, &r.dist_a),
                dist_b: resolve(&root, &r.dist_b),
                h: r.h,
            })
        })
        .collect()
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Decoded images keyed by path, each loaded once.
#[derive(Clone, Debug, Default)]
pub struct ImageSet {
    images: HashMap<PathBuf, Arc<ImageTensor>>,
}

impl ImageSet {
    /// Decodes every distinct path, in parallel when `workers > 1`.
    pub fn load<'a>(paths: impl IntoIterator<Item = &'a Path>, workers: usize) -> Result<Self> {
        let mut unique: Vec<PathBuf> = paths.into_iter().map(Path::to_path_buf).collect();
        unique.sort();
        unique.dedup();
        let images = map_indexed(unique.len(), workers, |i| load_image(&unique[i]).map(Arc::new))?;
        Ok(ImageSet {
            images: unique.into_iter().zip(images).collect(),
        })
    }

    pub fn insert(&mut self, path: impl Into<PathBuf>, img: ImageTensor) {
        self.images.insert(path.into(), Arc::new(img));
    }

    pub fn get(&self, path: &Path) -> Result<&Arc<ImageTensor>> {
        self.images.get(path).ok_or_else(|| Error::Data {
            record: path.display().to_string(),
            reason: "image not loaded".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl MosSample {
    pub fn paths(&self) -> [&Path; 2] {
        [&self.ref_path, &self.dist_path]
    }
}

impl TripletSample {
    pub fn paths(&self) -> [&Path; 3] {
        [&self.ref_path, &self.dist_a, &self.dist_b]
    }
}
