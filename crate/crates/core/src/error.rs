use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite {path}: run `trajmine {stage}` first")]
    Prerequisite { stage: String, path: PathBuf },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training {
        epoch: usize,
        reason: String,
        log: Box<crate::train::TrainLog>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Prerequisite { .. } => 3,
            Error::Numeric(_) | Error::Training { .. } | Error::UndefinedMetric(_) => 4,
            _ => 1,
        }
    }
}
