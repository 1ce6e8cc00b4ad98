//! Run manifest: a small JSON record tying a command's outputs to the seed
//! and configuration that produced them. Deliberately timestamp-free so a
//! repeated run emits byte-identical manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dnas_core::error::Result;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub seed: u64,
    pub config_hash: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config_hash: &str) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            artifacts: Vec::new(),
        }
    }

    pub fn push_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
