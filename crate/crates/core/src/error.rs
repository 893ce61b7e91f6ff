use std::path::PathBuf;

use dcd_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Graph(#[from] AutodiffError),

    #[error("input dimension {got} does not match model dimension {expected}")]
    DimMismatch { expected: usize, got: usize },

    #[error("exact Laplacian limited to {max} dimensions, got {dim}; use the Hutchinson estimator")]
    DimTooLarge { dim: usize, max: usize },

    #[error("time {t} outside [0, {t_max}]")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("Langevin chain produced a non-finite iterate at step {step}")]
    ChainDiverged { step: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("IDX file: {0}")]
    Idx(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
