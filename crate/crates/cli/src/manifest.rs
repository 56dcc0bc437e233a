//! Run manifests: what produced a directory and which files it holds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use idcl_core::{Error, Result};

pub const FILE_NAME: &str = "manifest.json";

pub fn code_version() -> String {
    format!("idcl {}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub dataset: String,
    pub dataset_hash: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    /// The full config in the flat `key = value` format.
    pub config: String,
    pub deterministic: bool,
    /// Directory layout relative to the output root.
    pub layout: String,
    /// Every file of the directory, relative to it.
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(FILE_NAME);
        if !path.is_file() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(FILE_NAME);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Adds `file` (relative to the manifest's directory) once.
    pub fn list(&mut self, file: impl Into<String>) {
        let file = file.into();
        if !self.files.contains(&file) {
            self.files.push(file);
            self.files.sort();
        }
    }
}
