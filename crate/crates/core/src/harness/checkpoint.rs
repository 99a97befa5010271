//! Single-file checkpoints.
//!
//! Layout: magic `VCKP`, a little-endian `u64` manifest length, the JSON
//! manifest, then one `VCT1` tensor per manifest entry in order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{decode_tensor, encode_tensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCKP";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    config: ExperimentConfig,
    iteration: u64,
    best_m_j: Option<f64>,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Model parameters, optimizer state and the config they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Completed training iterations.
    pub iteration: u64,
    /// Best train-set `M_J` seen so far, if any evaluation has run.
    pub best_m_j: Option<f64>,
    pub params: ParamStore<f32>,
    pub optim: AdamW,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        for (role, store) in [(Role::Param, &self.params), (Role::AdamM, &self.optim.m), (Role::AdamV, &self.optim.v)] {
            tensors.extend(store.names().map(|n| TensorEntry { name: n.clone(), role }));
        }
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            iteration: self.iteration,
            best_m_j: self.best_m_j,
            optimizer_step: self.optim.step,
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in [&self.params, &self.optim.m, &self.optim.v] {
            for (_, t) in store.iter() {
                encode_tensor(t, &mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::validation("not a checkpoint: bad magic"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(12))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::validation("checkpoint manifest is truncated"))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..end])
            .map_err(|e| Error::validation(format!("checkpoint manifest: {e}")))?;
        manifest.config.validate().map_err(|e| Error::validation(format!("checkpoint config: {e}")))?;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut pos = end;
        for entry in &manifest.tensors {
            let (t, used): (Tensor<f32>, usize) = decode_tensor(&bytes[pos..])
                .map_err(|e| Error::validation(format!("checkpoint tensor `{}`: {e}", entry.name)))?;
            pos += used;
            let store = match entry.role {
                Role::Param => &mut params,
                Role::AdamM => &mut m,
                Role::AdamV => &mut v,
            };
            if store.get(&entry.name).is_ok() {
                return Err(Error::validation(format!("duplicate checkpoint tensor `{}`", entry.name)));
            }
            store.insert(entry.name.clone(), t);
        }
        if pos != bytes.len() {
            return Err(Error::validation(format!("{} trailing bytes after checkpoint tensors", bytes.len() - pos)));
        }
        let names = |s: &ParamStore<f32>| s.iter().map(|(n, t)| (n.clone(), t.dims().to_vec())).collect::<Vec<_>>();
        if names(&params) != names(&m) || names(&params) != names(&v) {
            return Err(Error::validation("optimizer state does not cover the same tensors as the parameters"));
        }
        Ok(Checkpoint {
            config: manifest.config,
            iteration: manifest.iteration,
            best_m_j: manifest.best_m_j,
            params,
            optim: AdamW { m, v, step: manifest.optimizer_step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Validation(m) => Error::validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Refuse a checkpoint whose config differs from `expected` unless
    /// `force` is set.
    pub fn check_config(&self, expected: &ExperimentConfig, force: bool) -> Result<()> {
        if !force && &self.config != expected {
            return Err(Error::validation(
                "checkpoint config does not match the requested config (use --force to override)",
            ));
        }
        Ok(())
    }
}
