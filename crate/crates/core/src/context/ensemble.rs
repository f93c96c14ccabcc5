//! Per-fixed-set-size ensembles and their on-disk layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::PoolingPredicate;
use super::model::{ContextModel, HeadKind};
use crate::error::{Error, Result};
use crate::nn::{check_version, CHECKPOINT_VERSION};

pub const DEFAULT_K_SPLIT: usize = 8;
/// Bumped whenever the feature layout of the context model changes.
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModels {
    pub head_kind: HeadKind,
    pub k_split: usize,
    /// Dedicated members for `K <= k_split`; missing sizes fall back to the
    /// generic model.
    pub per_k: BTreeMap<usize, ContextModel>,
    pub generic: ContextModel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub version: u32,
    pub head_kind: HeadKind,
    pub num_classes: usize,
    pub k_split: usize,
    pub feature_version: u32,
    pub predicate: PoolingPredicate,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MemberFile {
    version: u32,
    model: ContextModel,
}

impl EnsembleModels {
    /// An ensemble holding only the generic model.
    pub fn generic_only(generic: ContextModel, k_split: usize) -> Self {
        EnsembleModels {
            head_kind: generic.head_kind,
            k_split,
            per_k: BTreeMap::new(),
            generic,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.generic.num_classes
    }

    pub fn select_model(&self, k: usize) -> &ContextModel {
        if k <= self.k_split {
            if let Some(m) = self.per_k.get(&k) {
                return m;
            }
        }
        &self.generic
    }

    pub fn validate(&self) -> Result<()> {
        self.generic.validate()?;
        for (&k, m) in &self.per_k {
            m.validate()?;
            if k > self.k_split {
                return Err(Error::InvalidData(format!("member K={k} exceeds K_split={}", self.k_split)));
            }
            if m.head_kind != self.head_kind || m.num_classes != self.num_classes() {
                return Err(Error::InvalidData(format!("member K={k} disagrees with the generic model")));
            }
        }
        if self.generic.head_kind != self.head_kind {
            return Err(Error::InvalidData("generic model has the wrong head kind".into()));
        }
        Ok(())
    }

    pub fn manifest(&self, predicate: PoolingPredicate) -> EnsembleManifest {
        EnsembleManifest {
            version: CHECKPOINT_VERSION,
            head_kind: self.head_kind,
            num_classes: self.num_classes(),
            k_split: self.k_split,
            feature_version: FEATURE_VERSION,
            predicate,
            members: self.per_k.keys().copied().collect(),
        }
    }

    /// Writes `manifest.json`, `generic.json`, and `k<K>.json` per member.
    pub fn save(&self, dir: &Path, predicate: PoolingPredicate) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, model: &ContextModel| -> Result<()> {
            let path = dir.join(name);
            let file = MemberFile { version: CHECKPOINT_VERSION, model: model.clone() };
            fs::write(&path, serde_json::to_string(&file).expect("model serializes")).map_err(|e| Error::io(&path, e))
        };
        write("generic.json".into(), &self.generic)?;
        for (k, m) in &self.per_k {
            write(format!("k{k}.json"), m)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let manifest = serde_json::to_string_pretty(&self.manifest(predicate)).expect("manifest serializes");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Loads an ensemble, refusing one trained under a different pooling
    /// predicate or feature layout.
    pub fn load(dir: &Path, predicate: PoolingPredicate) -> Result<Self> {
        let manifest: EnsembleManifest = read_versioned(&dir.join(MANIFEST_FILE))?;
        if manifest.feature_version != FEATURE_VERSION {
            return Err(Error::Version { found: manifest.feature_version, expected: FEATURE_VERSION });
        }
        if manifest.predicate != predicate {
            return Err(Error::Config(format!(
                "ensemble in {} was trained with pooling {:?}, expected {:?}",
                dir.display(),
                manifest.predicate,
                predicate
            )));
        }
        let generic = read_versioned::<MemberFile>(&dir.join("generic.json"))?.model;
        let mut per_k = BTreeMap::new();
        for &k in &manifest.members {
            per_k.insert(k, read_versioned::<MemberFile>(&dir.join(format!("k{k}.json")))?.model);
        }
        let ensemble = EnsembleModels {
            head_kind: manifest.head_kind,
            k_split: manifest.k_split,
            per_k,
            generic,
        };
        ensemble.validate()?;
        if ensemble.num_classes() != manifest.num_classes {
            return Err(Error::InvalidData("manifest class count disagrees with the models".into()));
        }
        Ok(ensemble)
    }
}

pub(crate) fn read_versioned<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedRecord(format!("{}: {e}", path.display())))?;
    check_version(&value)?;
    serde_json::from_value(value).map_err(|e| Error::MalformedRecord(format!("{}: {e}", path.display())))
}
