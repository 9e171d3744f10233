use std::io;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::data::DataError;
use crate::encoder::EmbeddingFileError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingFileError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("non-finite loss at step {step}: {source}")]
    NonFiniteLoss {
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// True for failures caused by numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::Tensor(TensorError::NonFinite { .. })
                | Error::Tensor(TensorError::DegenerateSoftmax { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
