//! Checkpoints: a JSON manifest plus one little-endian `f32` file per parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub config_hash: String,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

impl CheckpointManifest {
    pub fn has_param_prefix(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix))
    }
}

pub fn save_checkpoint(dir: &Path, model: &ModelConfig, store: &ParamStore, step: usize) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id).to_string();
        let value = store.value(id);
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = value.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        std::fs::write(dir.join(&file), bytes)?;
        params.push(ParamEntry { name, rows: value.rows(), cols: value.cols(), file });
    }
    let manifest = CheckpointManifest { model: model.clone(), config_hash: model.hash(), step, params };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the model from the manifest and overwrites every parameter.
/// With `expected` set, its hash must match the stored one.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<(Model, ParamStore, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.model.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("manifest model config does not match its stored hash".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != manifest.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {}, requested {}",
                manifest.config_hash,
                cfg.hash()
            )));
        }
    }
    let (model, mut store) = Model::new(&manifest.model, 0)?;
    if manifest.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for p in &manifest.params {
        let id = store.id(&p.name).ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", p.name)))?;
        let shape = store.value(id).shape();
        if shape != (p.rows, p.cols) {
            return Err(Error::Checkpoint(format!(
                "{}: stored shape {}x{}, model {:?}",
                p.name, p.rows, p.cols, shape
            )));
        }
        let bytes = std::fs::read(dir.join(&p.file))?;
        if bytes.len() != 4 * p.rows * p.cols {
            return Err(Error::Checkpoint(format!("{}: {} bytes for {}x{}", p.file, bytes.len(), p.rows, p.cols)));
        }
        let data = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        store.set_value(id, Matrix::from_vec(p.rows, p.cols, data));
    }
    Ok((model, store, manifest))
}
