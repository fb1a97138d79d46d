//! Run manifests and atomic file output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Identifies the build that produced an artifact.
pub const BUILD_ID: &str = env!("NMTLAB_BUILD_ID");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub ok: bool,
    pub error: Option<String>,
    pub started: u64,
    pub finished: u64,
}

/// Per-objective training summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub epoch_losses: Vec<f64>,
    pub final_el2n_noisy: Option<f64>,
    pub final_el2n_clean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub build_id: String,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    pub training: BTreeMap<String, TrainSummary>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub created: u64,
    pub finished: Option<u64>,
}

impl RunManifest {
    pub fn new(config: ExperimentConfig, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            build_id: BUILD_ID.to_owned(),
            status: RunStatus::Partial,
            config,
            seeds,
            stages: Vec::new(),
            training: BTreeMap::new(),
            artifacts: Vec::new(),
            created: now(),
            finished: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &to_json(self)?)
    }

    pub fn add_artifact(&mut self, rel: &str) {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_owned());
            self.artifacts.sort();
        }
    }

    /// Replaces any earlier record of the same stage.
    pub fn record_stage(&mut self, rec: StageRecord) {
        self.stages.retain(|s| s.stage != rec.stage);
        self.stages.push(rec);
    }

    /// A copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timestamps(&self) -> Self {
        let mut m = self.clone();
        m.created = 0;
        m.finished = m.finished.map(|_| 0);
        for s in &mut m.stages {
            s.started = 0;
            s.finished = 0;
        }
        m
    }
}

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}
