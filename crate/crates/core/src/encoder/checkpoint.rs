//! JSON checkpoint files for encoder weights.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so `load(save(m))` reproduces every parameter bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::numerics::RngSeed;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "unimetric-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    /// Training iteration at which the weights were captured.
    pub step: u64,
    pub seed: RngSeed,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    step: u64,
    seed: RngSeed,
    config: EncoderConfig,
    params: Vec<f64>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let doc = Document {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            seed: self.seed,
            config: self.params.config().clone(),
            params: self.params.as_slice().to_vec(),
        };
        serde_json::to_string(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let doc: Document =
            serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::format(
                origin,
                format!("not an encoder checkpoint (format '{}')", doc.format),
            ));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                origin,
                format!(
                    "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                    doc.version
                ),
            ));
        }
        let params = EncoderParams::from_flat(doc.config, doc.params)
            .map_err(|e| Error::format(origin, e.to_string()))?;
        Ok(Checkpoint {
            params,
            step: doc.step,
            seed: doc.seed,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, ckpt.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text, path)
}
