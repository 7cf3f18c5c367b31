//! The run manifest written next to every checkpoint.

use std::fs;
use std::path::Path;

use quicknet::cost::CostLedger;
use quicknet::trainer::{CascadeRun, EndToEndRun};
use quicknet::{Architecture, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.qnet";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const COST_REPORT_FILE: &str = "cost_report.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Quicknet,
    End2end,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub images: String,
    pub labels: String,
    pub images_sha256: String,
    pub labels_sha256: String,
    pub samples: usize,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    /// Size of the stratified subset actually used, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<usize>,
}

impl DatasetInfo {
    /// Identity used to decide whether two runs saw the same data.
    pub fn fingerprint(&self) -> (&str, &str, Option<usize>) {
        (&self.images_sha256, &self.labels_sha256, self.subset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub threshold: f64,
    /// Early-exit accuracy for cascade runs, last-exit accuracy for end-to-end runs.
    pub test_accuracy: Option<f64>,
    pub mean_inference_flops: Option<f64>,
    pub training_flops: u64,
    pub full_forward_flops: u64,
    pub backbone_forward_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub mode: TrainMode,
    pub seed: u64,
    pub config: TrainConfig,
    pub architecture_file: String,
    /// Git blob hash (SHA-256 object format) of the architecture file.
    pub architecture_hash: String,
    pub architecture: Architecture,
    pub dataset: DatasetInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<DatasetInfo>,
    pub trained_blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cascade: Option<CascadeRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_to_end: Option<EndToEndRun>,
    pub metrics: FinalMetrics,
    pub checkpoint: FileDigest,
}

impl RunManifest {
    /// The architecture restricted to the blocks present in the checkpoint.
    pub fn trained_architecture(&self) -> Architecture {
        let mut arch = self.architecture.clone();
        arch.blocks.truncate(self.trained_blocks);
        arch
    }

    pub fn ledger(&self) -> Option<&CostLedger> {
        match (&self.cascade, &self.end_to_end) {
            (Some(c), _) => Some(&c.ledger),
            (_, Some(e)) => Some(&e.ledger),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> CliResult<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Core(quicknet::Error::Io {
            path: path.into(),
            source: e,
        }))?;
        serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// `sha256("blob <len>\0" ++ content)`, as git computes object ids.
pub fn git_blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
