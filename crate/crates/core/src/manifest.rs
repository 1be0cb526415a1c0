//! Provenance record embedded in every emitted report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Command, fully resolved configuration, input digests, seed and tool
/// version. Contains nothing time- or host-dependent, so identical manifests
/// go with identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub base_seed: Option<u64>,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            base_seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    /// Records the SHA-256 of the file at `path`.
    pub fn with_input(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.base_seed = Some(seed);
        self
    }
}
