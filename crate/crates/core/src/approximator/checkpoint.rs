//! Parameter checkpoints: `<stem>.bin` holds the raw values, `<stem>.json`
//! describes the architecture.
//!
//! Binary layout (all little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 8     | magic `PBRLPRM1`                |
//! | 8     | parameter count `n` as `u64`    |
//! | 8 * n | parameter values as IEEE `f64`  |

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Architecture, LayerSpec, ParamVector};

const MAGIC: &[u8; 8] = b"PBRLPRM1";
const FORMAT: &str = "pbrl-params-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format: String,
    pub byte_order: String,
    pub param_count: usize,
    pub layers: Vec<LayerSpec>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save_checkpoint(
    stem: &Path,
    arch: &Architecture,
    params: &ParamVector,
) -> Result<(), CheckpointError> {
    if params.len() != arch.param_count() {
        return Err(CheckpointError::Malformed(format!(
            "architecture needs {} parameters, got {}",
            arch.param_count(),
            params.len()
        )));
    }
    let (bin, json) = paths(stem);
    let mut bytes = Vec::with_capacity(16 + 8 * params.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(bin, bytes)?;
    let sidecar = CheckpointSidecar {
        format: FORMAT.to_string(),
        byte_order: "little_endian".to_string(),
        param_count: params.len(),
        layers: arch.layers().to_vec(),
    };
    fs::write(json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(Architecture, ParamVector), CheckpointError> {
    let (bin, json) = paths(stem);
    let sidecar: CheckpointSidecar = serde_json::from_slice(&fs::read(json)?)?;
    if sidecar.format != FORMAT {
        return Err(CheckpointError::Malformed(format!(
            "unknown format {:?}",
            sidecar.format
        )));
    }
    let arch = Architecture::new(sidecar.layers)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let bytes = fs::read(bin)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if count != sidecar.param_count || count != arch.param_count() {
        return Err(CheckpointError::Malformed(format!(
            "parameter count {count} disagrees with sidecar ({}) or layers ({})",
            sidecar.param_count,
            arch.param_count()
        )));
    }
    if bytes.len() != 16 + 8 * count {
        return Err(CheckpointError::Malformed("truncated parameter block".into()));
    }
    let values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((arch, ParamVector::from_vec(values)))
}
