use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::StepRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("training diverged at epoch {}, step {}: {reason}", record.epoch, record.step)]
    Divergence {
        record: Box<StepRecord>,
        reason: String,
    },

    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("refusing to overwrite existing output {0}")]
    Overwrite(PathBuf),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
