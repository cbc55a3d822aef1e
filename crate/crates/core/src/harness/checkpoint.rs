//! Checkpoints: `manifest.json` (config plus tensor paths and shapes) and
//! one raw little-endian f64 blob per tensor, named by its parameter path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for t in params.named() {
        let file = format!("{}.f64", t.path);
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let target = dir.join(&file);
        fs::write(&target, bytes).map_err(|e| Error::io(&target, e))?;
        tensors.push(TensorEntry {
            path: t.path,
            shape: t.shape,
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: *cfg,
        tensors,
    };
    let target = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&target, text).map_err(|e| Error::io(&target, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ModelParams)> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest_path.clone(),
        source,
    })?;
    let bad = |reason: String| Error::Format {
        format: "checkpoint",
        path: manifest_path.clone(),
        reason,
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let cfg = manifest.config;
    let mut params = ModelParams::init(&cfg)?;
    let mut slots = params.named_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(bad(format!("expected {} tensors, manifest lists {}", slots.len(), manifest.tensors.len())));
    }
    for (slot, entry) in slots.iter_mut().zip(&manifest.tensors) {
        if slot.path != entry.path || slot.shape != entry.shape {
            return Err(bad(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.path, entry.shape, slot.path, slot.shape
            )));
        }
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(bad(format!("tensor file name {:?} is not a plain file name", entry.file)));
        }
        let blob_path = dir.join(&entry.file);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if bytes.len() != 8 * slot.data.len() {
            return Err(bad(format!("{} holds {} bytes, expected {}", entry.file, bytes.len(), 8 * slot.data.len())));
        }
        for (v, chunk) in slot.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    drop(slots);
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("checkpoint {}", dir.display())));
    }
    Ok((cfg, params))
}
