//! JSON weight checkpoints with a schema version and a kind tag.

use serde::{Deserialize, Serialize};
use std::path::Path;

use super::model::ParamSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// On-disk form: versioned, tagged by model kind, carrying an arbitrary
/// JSON config blob the owning module interprets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    /// Auxiliary data (normalization stats, training metadata).
    pub extra: serde_json::Value,
    pub tensors: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, extra: serde_json::Value, tensors: ParamSet) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind: kind.to_string(),
            config,
            extra,
            tensors,
        }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(&path)?);
        let ckpt: Checkpoint = serde_json::from_reader(f)?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint schema {} (expected {})",
                ckpt.schema_version, CHECKPOINT_SCHEMA_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// Fail unless the checkpoint was written for `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind '{}' where '{kind}' was expected",
                self.kind
            )));
        }
        Ok(())
    }
}
