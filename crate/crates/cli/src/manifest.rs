use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Record of one run, written next to its outputs as
/// `<subcommand>.<output stem>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// SHA-256 of every input and output file, keyed by path.
    pub artifact_hashes: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn start(subcommand: &str, seed: u64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            config: serde_json::Value::Null,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            artifact_hashes: BTreeMap::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn config(&mut self, config: &impl Serialize) {
        self.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn input(&mut self, role: &str, path: &Path) {
        self.inputs.insert(role.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, role: &str, path: &Path) {
        self.outputs.insert(role.to_string(), path.to_path_buf());
    }

    /// Hashes all recorded files and writes the manifest into `dir`, named
    /// after the subcommand and `stem`.
    pub fn finish(mut self, dir: &Path, stem: &str) -> Result<PathBuf, CliError> {
        for p in self.inputs.values().chain(self.outputs.values()) {
            self.artifact_hashes
                .insert(p.display().to_string(), file_sha256(p)?);
        }
        self.finished_unix_ms = now_ms();
        let path = dir.join(format!("{}.{stem}.manifest.json", self.subcommand));
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
