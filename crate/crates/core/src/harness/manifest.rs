//! Run manifest: stage status, artifacts and checkpoint write counts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TrainClients,
    UploadCheckpoints,
    ScoreInconsistency,
    Augment,
    Distill,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::TrainClients,
        Stage::UploadCheckpoints,
        Stage::ScoreInconsistency,
        Stage::Augment,
        Stage::Distill,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainClients => "train_clients",
            Stage::UploadCheckpoints => "upload_checkpoints",
            Stage::ScoreInconsistency => "score_inconsistency",
            Stage::Augment => "augment",
            Stage::Distill => "distill",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn index(self) -> usize {
        Stage::ALL.iter().position(|&s| s == self).expect("listed")
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Wall-clock seconds of the last attempt.
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Times each model checkpoint has been written, by model name.
    pub checkpoint_writes: BTreeMap<String, u32>,
    /// SHA-256 of each uploaded client checkpoint.
    pub uploads: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest {
            config_hash,
            stages: Stage::ALL
                .iter()
                .map(|&stage| StageRecord {
                    stage,
                    status: StageStatus::Pending,
                    seconds: 0.0,
                    error: None,
                })
                .collect(),
            artifacts: BTreeMap::new(),
            checkpoint_writes: BTreeMap::new(),
            uploads: BTreeMap::new(),
        }
    }

    pub fn record(&self, stage: Stage) -> &StageRecord {
        &self.stages[stage.index()]
    }

    pub(crate) fn record_mut(&mut self, stage: Stage) -> &mut StageRecord {
        &mut self.stages[stage.index()]
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.record(stage).status == StageStatus::Completed
    }

    pub fn completed_stages(&self) -> usize {
        self.stages.iter().filter(|r| r.status == StageStatus::Completed).count()
    }

    /// First stage that has not completed.
    pub fn next_stage(&self) -> Option<Stage> {
        self.stages.iter().find(|r| r.status != StageStatus::Completed).map(|r| r.stage)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        super::write_atomic(path, text.as_bytes())
    }
}
