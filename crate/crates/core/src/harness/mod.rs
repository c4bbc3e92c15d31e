//! Experiment orchestration: configuration, the staged one-shot pipeline,
//! the ablation table and report emission.

pub mod ablation;
pub mod config;
pub mod manifest;
pub mod pipeline;

use std::path::Path;

use crate::error::{Error, Result};

pub use ablation::{ablation_csv, ablation_rows, run_ablation, AblationResult, AblationRow, Axis};
pub use config::{stage_seed, DomainRecipe, ExperimentConfig};
pub use manifest::{RunManifest, Stage, StageStatus};
pub use pipeline::{run_experiment, Run, FEDAVG_MODEL, GLOBAL_MODEL};

/// Writes through a temporary sibling and renames, creating parent
/// directories as needed.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
