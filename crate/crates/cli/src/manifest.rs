use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, SecondsFormat, Utc};
use mindrisk_core::digest::file_digest;
use serde::{Deserialize, Serialize};

/// Provenance of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub started_at: String,
    pub finished_at: String,
    pub config_digest: String,
    pub prompt_version: String,
    pub prompt_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tape_digest: Option<String>,
    /// Path to SHA-256 of each file read.
    pub inputs: BTreeMap<String, String>,
    /// Path to SHA-256 of each file written.
    pub outputs: BTreeMap<String, String>,
    pub backend_requests: u64,
    pub outcome: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(path: &Path) -> anyhow::Result<Self> {
        if !path.exists() {
            return Ok(Self {
                tool_version: env!("CARGO_PKG_VERSION").into(),
                ..Default::default()
            });
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn now() -> String {
    let t: DateTime<Utc> = Utc::now();
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Collects the files a stage touched; digests are taken when the record is
/// built, after every output has been written.
#[derive(Debug, Default)]
pub struct StageFiles {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl StageFiles {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn digests(paths: &[PathBuf]) -> anyhow::Result<BTreeMap<String, String>> {
        paths
            .iter()
            .filter(|p| p.exists())
            .map(|p| {
                let d = file_digest(p).with_context(|| format!("digesting {}", p.display()))?;
                Ok((p.display().to_string(), d))
            })
            .collect()
    }
}
