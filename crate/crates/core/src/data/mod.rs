//! Synthetic datasets, image IO and augmentation.

pub mod augment;
mod ppm;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment_train, AugmentConfig};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use synth::{gen_fake, gen_real, DatasetSpec, Family, Sample, Split, FAKE, REAL};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {err}")]
    Io {
        path: PathBuf,
        err: std::io::Error,
    },
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            err,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    pub label: usize,
    pub family: Option<Family>,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count(&self, split: Split, label: usize) -> usize {
        self.files.iter().filter(|f| f.split == split && f.label == label).count()
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `{train,eval}/{real,fake}/NNNNN.ppm` plus `manifest.json`.
/// Evaluation fakes of every listed family share `eval/fake`; the manifest
/// records each file's family.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec) -> Result<Manifest, DataError> {
    spec.validate()?;
    let mut files = Vec::new();
    let emit = |split: Split, samples: Vec<Sample>, files: &mut Vec<ManifestEntry>| -> Result<(), DataError> {
        for s in samples {
            let class = if s.label == REAL { "real" } else { "fake" };
            let rel = format!("{}/{class}/{:05}.ppm", split.name(), s.id - spec.real_ids(split).start);
            if files.iter().any(|f: &ManifestEntry| f.path == rel) {
                continue;
            }
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
            }
            save_ppm(&path, &s.image)?;
            files.push(ManifestEntry {
                path: rel,
                split,
                label: s.label,
                family: s.family,
                id: s.id,
            });
        }
        Ok(())
    };
    emit(Split::Train, spec.train_set()?, &mut files)?;
    for &fam in &spec.eval_families {
        emit(Split::Eval, spec.eval_set(fam)?, &mut files)?;
    }
    let manifest = Manifest {
        spec: spec.clone(),
        files,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads one split; `family` restricts fakes to that family (reals always kept).
pub fn read_split(dir: &Path, split: Split, family: Option<Family>) -> Result<Vec<Sample>, DataError> {
    let manifest = read_manifest(dir)?;
    manifest
        .files
        .iter()
        .filter(|f| f.split == split && (f.label == REAL || family.is_none() || f.family == family))
        .map(|f| {
            Ok(Sample {
                image: load_ppm(&dir.join(&f.path))?,
                label: f.label,
                family: f.family,
                id: f.id,
            })
        })
        .collect()
}
