use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, EncoderConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    config: EncoderConfig,
    config_hash: String,
    tensors: Vec<NamedTensor>,
}

/// Writes every parameter as JSON. Floats round-trip exactly.
pub fn save_checkpoint(path: &Path, encoder: &DualEncoder) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: encoder.config().clone(),
        config_hash: encoder.config().hash(),
        tensors: encoder
            .params()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint. When `expected` is given, the stored config hash must
/// match it.
pub fn load_checkpoint(path: &Path, expected: Option<&EncoderConfig>) -> Result<DualEncoder> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::Corrupt {
        kind: "checkpoint",
        path: path.to_path_buf(),
        reason,
    };
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {}", file.version)));
    }
    let stored = file.config.hash();
    if stored != file.config_hash {
        return Err(corrupt("config hash does not match stored config".into()));
    }
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != stored {
            return Err(Error::HashMismatch {
                expected: want,
                found: stored,
            });
        }
    }
    let mut encoder = DualEncoder::new(file.config)?;
    let mut params = encoder.params_mut();
    if params.len() != file.tensors.len() {
        return Err(corrupt(format!("expected {} tensors, found {}", params.len(), file.tensors.len())));
    }
    for ((name, slot), stored) in params.iter_mut().zip(file.tensors) {
        if stored.name != *name {
            return Err(corrupt(format!("expected tensor {name}, found {}", stored.name)));
        }
        if stored.shape != slot.shape() {
            return Err(corrupt(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                stored.shape,
                slot.shape()
            )));
        }
        slot.assign(stored.data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
    }
    Ok(encoder)
}
