use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::network::Provenance;
use crate::rng::sub_seed;

/// Root seed and the per-subsystem seeds derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub root: u64,
    pub init: u64,
    pub sampler: u64,
    pub augment: u64,
    pub threshold_sweep: u64,
}

impl RunSeeds {
    pub fn derive(root: u64) -> Self {
        Self {
            root,
            init: sub_seed(root, "init"),
            sampler: sub_seed(root, "sampler"),
            augment: sub_seed(root, "augment"),
            threshold_sweep: sub_seed(root, "threshold-sweep"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub final_loss: Option<f64>,
    pub final_val_f1: Option<f64>,
    pub best_val_f1: Option<f64>,
    pub best_step: Option<usize>,
    pub tracked_threshold: f64,
}

/// Everything needed to identify and replay a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seeds: RunSeeds,
    pub provenance: Provenance,
    pub train_data_hash: String,
    pub val_data_hash: Option<String>,
    pub metrics: RunMetrics,
    pub checkpoints: Vec<PathBuf>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::archive(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::archive(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::archive(path, e))
    }
}
