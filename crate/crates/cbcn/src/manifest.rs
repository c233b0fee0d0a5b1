//! Run manifest, written once before training starts.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use cbcn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{config, dataset, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub dataset: Vec<DatasetFile>,
    /// `None` for plain MNIST; the rotation seed for MNIST-rot.
    pub rotation_seed: Option<u64>,
    pub limit: Option<usize>,
    pub cbcn_version: String,
    pub started_unix: u64,
    pub outputs: BTreeMap<String, String>,
}

/// Written after training ends; the manifest itself is never rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub finished_unix: u64,
    pub epochs_completed: usize,
    pub final_test_accuracy: Option<f64>,
    pub final_test_error_rate: Option<f64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        cfg: &TrainConfig,
        data_dir: &Path,
        rotation_seed: Option<u64>,
        limit: Option<usize>,
        outputs: &[(&str, &Path)],
    ) -> Result<Self> {
        let dataset = dataset::mnist_files(data_dir)
            .iter()
            .map(|p| {
                Ok(DatasetFile {
                    path: p.display().to_string(),
                    sha256: dataset::sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config::entries(cfg).into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            seed: cfg.seed,
            dataset,
            rotation_seed,
            limit,
            cbcn_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            outputs: outputs.iter().map(|(k, p)| (k.to_string(), p.display().to_string())).collect(),
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
