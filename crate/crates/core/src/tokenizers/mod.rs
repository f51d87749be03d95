//! Speech and text tokenizers: k-means hidden units, the random phoneme
//! upsampler, and the learned text-to-unit model.

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::model::ModelError;
use crate::units::UnitsError;

mod kmeans;
mod t2u;
mod upsample;

pub use kmeans::{frame_purity, kmeans_assign, kmeans_fit, KMeansFit, KMeansModel, KMEANS_MAGIC};
pub use t2u::{t2u_infer, t2u_train, T2uConfig, T2uPair, TextToUnitModel};
pub use upsample::{phoneme_upsample, UpsamplerConfig};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("{points} points cannot fill {k} clusters")]
    TooFewPoints { points: usize, k: usize },
    #[error("feature dimension {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("bad magic: not a k-means file")]
    BadMagic,
    #[error("truncated at byte offset {0}")]
    Truncated(usize),
    #[error("tokenizer applied to the wrong unit kind")]
    WrongKind,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("pair {index}: durations sum to {durations} but there are {units} units")]
    PairMismatch { index: usize, durations: usize, units: usize },
    #[error("text-to-unit model has not been trained")]
    Untrained,
    #[error("optimizer: {0}")]
    Optim(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Units(#[from] UnitsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(CheckpointError),
}

impl From<CheckpointError> for TokenizerError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Truncated(at) => Self::Truncated(at),
            CheckpointError::Io(io) => Self::Io(io),
            other => Self::Checkpoint(other),
        }
    }
}

impl From<crate::numerics::NumericsError> for TokenizerError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        Self::Model(ModelError::from(e))
    }
}

pub type Result<T, E = TokenizerError> = std::result::Result<T, E>;
