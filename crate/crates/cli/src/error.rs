use spikerecon::classic_recon::ReconError;
use spikerecon::frame::FrameError;
use spikerecon::spike_codec::CodecError;
use spikerecon::spike_sim::SimError;
use spikerecon::swinsf::SwinError;
use spikerecon::train_eval::TrainError;
use thiserror::Error;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, parameters or config keys.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, corrupt or mismatched input data.
    #[error("{0}")]
    Data(String),
    /// Non-finite values during training or inference.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FrameError> for CliError {
    fn from(e: FrameError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ReconError> for CliError {
    fn from(e: ReconError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Params(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SwinError> for CliError {
    fn from(e: SwinError) -> Self {
        match e {
            SwinError::Config(_) => CliError::Usage(e.to_string()),
            SwinError::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Recon(r) => r.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
