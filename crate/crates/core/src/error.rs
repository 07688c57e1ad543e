use std::path::PathBuf;

use thiserror::Error;

use crate::numeric::NumericError;
use crate::training::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("halting value {value} at round {round} is outside (0, 1)")]
    HaltingRange { value: f64, round: usize },
    #[error("invalid halting settings: {0}")]
    HaltingSettings(String),
    #[error("layer {layer} exceeds the maximum of {max}")]
    LayerRange { layer: usize, max: usize },
    #[error("{0}")]
    InvalidInput(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("corpus {path} has {have} bytes, need at least {need}")]
    CorpusTooSmall {
        path: PathBuf,
        have: usize,
        need: usize,
    },
    #[error("dimension mismatch for {what}: checkpoint has {checkpoint}, requested {requested}")]
    DimensionMismatch {
        what: String,
        checkpoint: usize,
        requested: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
