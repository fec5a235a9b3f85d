use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("invalid format: {0}")]
    Format(String),

    #[error("invalid pruning parameters: {0}")]
    Prune(String),

    #[error("invalid kernel configuration: {0}")]
    Config(String),

    #[error("tuning failed: {0}")]
    Tune(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn prune(msg: impl Into<String>) -> Self {
        Error::Prune(msg.into())
    }

    pub(crate) fn tune(msg: impl Into<String>) -> Self {
        Error::Tune(msg.into())
    }
}
