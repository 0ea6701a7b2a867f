use thiserror::Error;

use crate::model::ModelParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate bag: {0}")]
    DegenerateBag(String),

    #[error("empty instance set: {0}")]
    EmptySet(String),

    #[error("cluster {0} has no instances")]
    EmptyCluster(usize),

    /// Training produced a non-finite loss. Carries the last parameters that
    /// still produced a finite loss.
    #[error("training diverged at epoch {epoch}, bag {bag_id}: loss = {loss}")]
    Divergence {
        epoch: usize,
        bag_id: u64,
        loss: f64,
        last_good: Box<ModelParams>,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("ground-truth roles unavailable: {0}")]
    RolesUnavailable(String),

    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checkpoint does not match data: {0}")]
    CheckpointMismatch(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
