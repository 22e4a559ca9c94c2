//! Spike-stream reconstruction network with windowed spatial attention and
//! temporal attention across three consecutive spike segments.

pub mod attention;
pub mod block;
pub mod checkpoint;
mod config;
pub mod model;
pub mod params;
pub mod window;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use attention::{sw_msa, tsa, MsaWeights, TsaWeights};
pub use block::{rssb_forward, sab_forward, Geometries, SabOutput};
pub use checkpoint::{AdamSnapshot, Checkpoint};
pub use config::{parse_kv, MlpForm, ModelConfig};
pub use model::{extract_spike_features, model_forward, reconstruction_loss, Forward, SwinSf};
pub use params::{param_specs, Bound, ParamStore};
pub use window::{window_partition, window_reverse, WindowBatch, WindowGeometry};

#[derive(Debug, Error)]
pub enum SwinError {
    #[error("config: {0}")]
    Config(String),
    #[error("parameter layout: {0}")]
    Layout(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("stream has {found} ticks, model expects {expected}")]
    StreamLength { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
