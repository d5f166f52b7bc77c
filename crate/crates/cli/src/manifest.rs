//! Per-run provenance record written as `manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    /// As given on the command line.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command. Contains no timestamps or absolute
/// output locations, so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<InputFile>,
    /// Relative to the output directory.
    pub outputs: Vec<String>,
    pub tool_version: String,
}

impl Manifest {
    pub fn new(command: &str, config: Option<&Path>) -> Self {
        Self {
            command: command.to_string(),
            config: config.map(|p| p.display().to_string()),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_input(&mut self, path: &Path, bytes: &[u8]) {
        let path = path.display().to_string();
        if self.inputs.iter().any(|i| i.path == path) {
            return;
        }
        self.inputs.push(InputFile { path, sha256: sha256_hex(bytes) });
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
