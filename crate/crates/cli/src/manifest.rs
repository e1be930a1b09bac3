use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Record of one CLI invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub git_revision: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<OutputDigest>,
}

#[derive(Debug, Serialize)]
pub struct OutputDigest {
    pub path: String,
    pub sha256: String,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    started: DateTime<Utc>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self { command: command.to_string(), config, seed, started: Utc::now(), outputs: Vec::new() }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes every registered output and writes `<primary>.manifest.json`.
    pub fn finish(self, primary: &Path) -> Result<PathBuf> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                let bytes = fs::read(p).with_context(|| format!("reading {} for its digest", p.display()))?;
                Ok(OutputDigest { path: p.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().collect(),
            config: self.config,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            git_revision: git_revision(),
            started_at: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            outputs,
        };
        let path = manifest_path(primary);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn git_revision() -> String {
    Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}
