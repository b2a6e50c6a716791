//! Dataset generation, experiment orchestration and metrics.

pub mod dataset;
pub mod experiment;
pub mod metrics;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use dataset::{check_held_out, gen_dataset, held_out_kernels, Dataset, DatasetParams};
pub use experiment::{build_inputs, run_experiment, train_model, transfer_prior, ExperimentInputs, ExperimentPlan};
pub use metrics::{compute_metrics, ArmSummary, MetricsEntry, MetricsReport};

/// Machine-readable summary written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub arms: Vec<String>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<PathBuf>,
    pub crate_version: String,
}

impl RunManifest {
    pub fn new(command: &str, arms: Vec<String>, seeds: Vec<u64>, config_hash: String, artifacts: Vec<PathBuf>) -> Self {
        RunManifest {
            command: command.to_string(),
            arms,
            seeds,
            config_hash,
            artifacts,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
