//! Optimization loop, evaluation, checkpoints and scripted experiments.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod metrics;
pub mod optim;
mod runner;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{apply_override, OptimConfig, RunConfig};
pub use metrics::{accuracy, compute_ap, EvalMetrics, MetricsReport, Scored};
pub use optim::{adamw_update, AdamW, Moments};
pub use runner::{
    batch_images, evaluate, load_model, score, train, write_gates_csv, write_logits_csv, write_run_outputs, TrainRun,
};

use crate::data::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {err}")]
    Io {
        path: PathBuf,
        err: std::io::Error,
    },
    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: u64, value: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("evaluation set is empty")]
    EmptyEval,
}

impl TrainError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            err,
        }
    }
}
