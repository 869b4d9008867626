//! Run manifests: what produced each artifact, and from which inputs.
//!
//! `manifest.json` in the output directory maps each command name to its
//! latest run. The manifest hash covers the command, resolved
//! configuration, input hashes, seed and tool version, but not timestamps,
//! so reruns with the same inputs reproduce it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub manifest_hash: String,
    pub started_at: String,
    pub finished_at: String,
    /// Artifact file name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(remtime_core::Error::from)?))
}

impl RunManifest {
    pub fn begin(
        command: &str,
        seed: u64,
        config: serde_json::Value,
        inputs: BTreeMap<String, String>,
    ) -> RunManifest {
        let config_hash = sha256_hex(config.to_string().as_bytes());
        let tool_version = env!("CARGO_PKG_VERSION").to_string();
        let identity = serde_json::json!({
            "command": command,
            "tool_version": tool_version,
            "seed": seed,
            "config_hash": config_hash,
            "inputs": inputs,
        });
        RunManifest {
            command: command.into(),
            tool_version,
            seed,
            config_hash,
            config,
            inputs,
            manifest_hash: sha256_hex(identity.to_string().as_bytes()),
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let hash = hash_file(&dir.join(name))?;
        self.artifacts.insert(name.into(), hash);
        Ok(())
    }

    /// Merges this run into the directory's manifest file.
    pub fn finish(mut self, dir: &Path) -> Result<RunManifest, CliError> {
        self.finished_at = chrono::Utc::now().to_rfc3339();
        let path = dir.join(MANIFEST_FILE);
        let mut all: BTreeMap<String, RunManifest> = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(remtime_core::Error::from)?,
            Err(_) => BTreeMap::new(),
        };
        all.insert(self.command.clone(), self.clone());
        let text = serde_json::to_string_pretty(&all).map_err(remtime_core::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(remtime_core::Error::from)?;
        Ok(self)
    }
}

/// The latest manifest entry of `command` in `dir`, if any.
pub fn previous(dir: &Path, command: &str) -> Option<RunManifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    let mut all: BTreeMap<String, RunManifest> = serde_json::from_str(&text).ok()?;
    all.remove(command)
}
