//! JSON wire types shared by the service and its client.

use std::path::PathBuf;

use forla_core::federation::CommReport;
use forla_core::harness::ExperimentConfig;
use forla_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

pub use forla_core::harness::Comparison as CompareResponse;
pub use forla_core::federation::CommReport as CommResponse;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataRequest {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataResponse {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub domains: usize,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub config: ExperimentConfig,
    /// Server-side directory for metrics, communication and event logs.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Rounds between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub resume: Option<PathBuf>,
}

impl TrainRequest {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            config,
            out_dir: None,
            checkpoint: None,
            checkpoint_every: 0,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub report: MetricReport,
    pub comm: CommReport,
    pub shared_params: usize,
    pub full_params: usize,
    /// Local iterations each client completed, by client id.
    pub iterations: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRequest {
    pub config: ExperimentConfig,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRequest {
    pub configs: Vec<ExperimentConfig>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRequest {
    pub config: ExperimentConfig,
    pub checkpoint: PathBuf,
    pub path: PathBuf,
    /// Client whose student encodes its own domain's held-out scenes.
    #[serde(default)]
    pub client: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub path: PathBuf,
    pub client: u64,
    pub domain: u32,
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRequest {
    pub config: ExperimentConfig,
    /// Without a checkpoint the report covers zero rounds.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    BadRequest,
    Config,
    Numerical,
    NotFound,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
}

pub mod routes {
    pub const HEALTH: &str = "/health";
    pub const GEN_DATA: &str = "/v1/gen-data";
    pub const TRAIN: &str = "/v1/train";
    pub const EVALUATE: &str = "/v1/evaluate";
    pub const COMPARE: &str = "/v1/compare";
    pub const EXPORT_FEATURES: &str = "/v1/export-features";
    pub const COMM_REPORT: &str = "/v1/comm-report";
}
