use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("checkpoint component `{component}` failed verification: {reason}")]
    Checksum { component: String, reason: String },

    #[error("incompatible checkpoint: manifest version {found}, supported {supported}")]
    Incompatible { found: u32, supported: u32 },

    #[error("non-finite loss at step {step} (t = {t}, lr = {lr:e}, batch = {batch})")]
    NonFiniteLoss {
        step: usize,
        t: usize,
        lr: f64,
        batch: usize,
    },

    #[error("too many malformed lines in {path}: {bad} of {total}")]
    MalformedData {
        path: PathBuf,
        bad: usize,
        total: usize,
    },

    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
