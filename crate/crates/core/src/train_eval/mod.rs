//! Optimization, training loop, image-quality metrics and evaluation tables.

mod eval;
mod metrics;
mod optim;
mod train;

use thiserror::Error;

use crate::classic_recon::ReconError;
use crate::spike_sim::SimError;
use crate::swinsf::SwinError;

pub use eval::{evaluate, evaluate_indexed, sample_label, EvalReport, EvalRow, Reconstructor, SEGMENT_NAMES};
pub use metrics::{mse, psnr, ssim, PSNR_CAP};
pub use optim::{lr_at, OptimizerState};
pub use train::{split_indices, train, EpochRecord, TrainReport, TrainRunConfig, Trainer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: &'static str, epoch: u64, step: u64 },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss:e} vs first loss {first:e}")]
    Diverged {
        loss: f64,
        first: f64,
        epoch: u64,
        step: u64,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("run config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] SwinError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Data(#[from] SimError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
