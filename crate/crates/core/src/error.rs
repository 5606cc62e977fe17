use std::path::PathBuf;

/// Errors produced by the explanation pipeline and its supporting modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument or input violates an operation's preconditions.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is unknown or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A referenced asset (checkpoint, dataset, run) does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    #[error("non-finite gradient at attack iteration {iteration} for instance {instance}")]
    NonFiniteGradient { iteration: usize, instance: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
