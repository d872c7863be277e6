use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("ingestion error: cannot read {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("training diverged at epoch {epoch}, step {step}{}", member.map(|m| format!(" (member {m})")).unwrap_or_default())]
    Training {
        member: Option<usize>,
        epoch: usize,
        step: usize,
    },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
