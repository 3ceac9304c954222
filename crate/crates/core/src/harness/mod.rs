//! Experiment harness: configuration, data preparation, the adversarial /
//! natural training loop with best-model selection, evaluation, sweeps and
//! checkpoints.

mod checkpoint;
mod config;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{parse_f64, parse_pairs, DataConfig, DataKind, FastConfig, OptimConfig, TrainConfig};
pub use train::{
    evaluate, init_threads, load_dataset, model_for, prepare_data, probe_stats, sweep, sweep_csv, sweep_key, train,
    train_on, write_run, ProbeStats, RunResult, Splits, SweepRun, SweepSummary, SWEEP_PARAMS,
};

use crate::ad::AdError;
use crate::attacks::AttackError;
use crate::data::DataError;
use crate::fast_engm::FastEngmError;
use crate::models::ModelError;
use crate::optim::OptimError;
use crate::stats::StatsError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config{}: {detail}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    FastEngm(#[from] FastEngmError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Train { epoch: usize, batch: usize, source: Box<HarnessError> },
    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code by error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Usage(_) => 2,
            Self::Io { .. } => 3,
            Self::Data(_) => 4,
            Self::Checkpoint(_) => 5,
            Self::Train { .. } | Self::Ad(_) | Self::Optim(_) | Self::FastEngm(_) | Self::Attack(_) | Self::Stats(_) => 6,
            Self::Model(_) => 7,
        }
    }
}
