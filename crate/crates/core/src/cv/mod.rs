//! Stratified cross-validation, class-balanced sampling and the training loop.

pub mod checkpoint;
mod split;
mod train;

use thiserror::Error;

pub use split::*;
pub use train::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CvError {
    #[error("k must be at least 2, got {0}")]
    BadK(usize),
    #[error("class {class} has {count} samples, fewer than k = {k}")]
    TooFewSamples { class: usize, count: usize, k: usize },
    #[error("class {0} has no samples")]
    ZeroCount(usize),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Cv(#[from] CvError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("data unavailable: {0}")]
    DataUnavailable(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss is not finite in fold {fold}, epoch {epoch}")]
    NonFinite { fold: usize, epoch: usize },
}
