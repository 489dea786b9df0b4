//! Staged artifact store: content-addressed stage outputs with summaries.
//!
//! Every pipeline stage writes its outputs under `<root>/<stage>/<key>/`
//! where `key` is a hash of the stage's config section, the run seed, and
//! the keys of its upstream artifacts. A `latest.json` pointer per stage
//! records the most recent key so downstream stages can locate inputs and
//! detect staleness. All writes are atomic (write-temp-then-rename).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Write a file atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Io(std::io::Error::other("path has no parent")))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Record of one completed stage execution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    /// Content key: hash of config section + seed + upstream keys.
    pub key: String,
    /// Hash of the full run config this stage ran under.
    pub config_hash: String,
    /// Upstream stage name -> upstream key.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the stage dir) -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Free-form numeric results (losses, metric values).
    pub stats: BTreeMap<String, f64>,
}

/// Filesystem layout manager for staged artifacts.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Directory holding one keyed execution of a stage.
    pub fn stage_dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(&key[..key.len().min(16)])
    }

    fn latest_path(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join("latest.json")
    }

    fn summary_path(&self, stage: &str, key: &str) -> PathBuf {
        self.stage_dir(stage, key).join("summary.json")
    }

    /// True when this exact stage execution already completed.
    pub fn is_complete(&self, stage: &str, key: &str) -> bool {
        self.summary_path(stage, key).exists()
    }

    /// Persist a summary (keyed copy + latest pointer).
    pub fn write_summary(&self, summary: &StageSummary) -> Result<()> {
        let json = serde_json::to_string_pretty(summary)?;
        atomic_write(&self.summary_path(&summary.stage, &summary.key), json.as_bytes())?;
        atomic_write(&self.latest_path(&summary.stage), json.as_bytes())?;
        Ok(())
    }

    /// Load the keyed summary for a known execution.
    pub fn load_summary(&self, stage: &str, key: &str) -> Result<StageSummary> {
        let path = self.summary_path(stage, key);
        if !path.exists() {
            return Err(Error::MissingStage(stage.to_string()));
        }
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Load the latest summary for a stage; `MissingStage` if it never ran.
    pub fn load_latest(&self, stage: &str) -> Result<StageSummary> {
        let path = self.latest_path(stage);
        if !path.exists() {
            return Err(Error::MissingStage(stage.to_string()));
        }
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Load the latest summary and verify it was produced by `expected_key`.
    /// A key mismatch means the stage ran under a different configuration.
    pub fn load_upstream(&self, stage: &str, expected_key: &str) -> Result<StageSummary> {
        let summary = self.load_latest(stage)?;
        if summary.key != expected_key {
            return Err(Error::Stale(format!(
                "{stage}: artifact key {} does not match expected {} (config changed; re-run {stage})",
                &summary.key[..16.min(summary.key.len())],
                &expected_key[..16.min(expected_key.len())],
            )));
        }
        Ok(summary)
    }

    /// Absolute path of a named output inside a stage execution.
    pub fn output_path(&self, summary: &StageSummary, name: &str) -> Result<PathBuf> {
        if !summary.outputs.contains_key(name) {
            return Err(Error::MissingStage(format!(
                "{}: output {name} not recorded",
                summary.stage
            )));
        }
        Ok(self.stage_dir(&summary.stage, &summary.key).join(name))
    }

    /// Verify recorded hashes of all outputs of a summary.
    pub fn verify_outputs(&self, summary: &StageSummary) -> Result<()> {
        for (name, expected) in &summary.outputs {
            let path = self.stage_dir(&summary.stage, &summary.key).join(name);
            let actual = crate::hashing::hash_file(&path)?;
            if &actual != expected {
                return Err(Error::Integrity(format!(
                    "{}/{name}: content hash mismatch",
                    summary.stage
                )));
            }
        }
        Ok(())
    }
}
