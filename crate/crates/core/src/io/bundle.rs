//! Trained model bundles: a directory holding `manifest.json` and one
//! matrix file per source basis.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::{read_matrix, write_matrix};
use crate::error::{Error, Result};
use crate::model::Basis;
use crate::trainer::TrainSpec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisEntry {
    pub file: String,
    pub source_id: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Training method label, e.g. `anmf`.
    pub method: String,
    pub spec: TrainSpec,
    pub bases: Vec<BasisEntry>,
    /// Total objective after initialization and after each epoch.
    pub history: Vec<f64>,
    /// Free-form, non-deterministic details (timestamps, host, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub method: String,
    pub spec: TrainSpec,
    pub bases: Vec<Basis>,
    pub history: Vec<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn new(method: impl Into<String>, spec: TrainSpec, bases: Vec<Basis>, history: Vec<f64>) -> Self {
        ModelBundle {
            method: method.into(),
            spec,
            bases,
            history,
            metadata: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.bases.len());
        for (i, b) in self.bases.iter().enumerate() {
            let file = format!("basis_{i}.anmf");
            write_matrix(dir.join(&file), &b.entries)?;
            entries.push(BasisEntry {
                file,
                source_id: b.source_id,
                rows: b.dim(),
                cols: b.rank(),
            });
        }
        let manifest = Manifest {
            format_version: BUNDLE_FORMAT_VERSION,
            method: self.method.clone(),
            spec: self.spec.clone(),
            bases: entries,
            history: self.history.clone(),
            metadata: self.metadata.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "bundle: unsupported format version {}",
                manifest.format_version
            )));
        }
        let mut bases = Vec::with_capacity(manifest.bases.len());
        for e in &manifest.bases {
            let entries = read_matrix(dir.join(&e.file))?;
            if entries.dim() != (e.rows, e.cols) {
                return Err(Error::Format(format!(
                    "bundle: {} is {:?}, manifest says {}x{}",
                    e.file,
                    entries.dim(),
                    e.rows,
                    e.cols
                )));
            }
            bases.push(Basis::new(entries, e.source_id)?);
        }
        if let Some(m) = bases.first().map(Basis::dim) {
            if bases.iter().any(|b| b.dim() != m) {
                return Err(Error::Format("bundle: bases disagree on the feature dimension".into()));
            }
        }
        Ok(ModelBundle {
            method: manifest.method,
            spec: manifest.spec,
            bases,
            history: manifest.history,
            metadata: manifest.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bundle() -> ModelBundle {
        let b0 = Basis::new(array![[1.0, 0.0], [0.0, 1.0]], 0).unwrap();
        let b1 = Basis::new(array![[0.6], [0.8]], 1).unwrap();
        ModelBundle::new("anmf", TrainSpec::default(), vec![b0, b1], vec![2.0, 1.0])
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle();
        b.save(dir.path()).unwrap();
        assert_eq!(ModelBundle::load(dir.path()).unwrap(), b);
    }

    #[test]
    fn saving_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        bundle().save(d1.path()).unwrap();
        bundle().save(d2.path()).unwrap();
        for f in [MANIFEST_FILE, "basis_0.anmf", "basis_1.anmf"] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
    }

    #[test]
    fn detects_inconsistent_manifest() {
        let dir = tempfile::tempdir().unwrap();
        bundle().save(dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replacen("\"cols\": 1", "\"cols\": 3", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(ModelBundle::load(dir.path()), Err(Error::Format(_))));
    }
}
