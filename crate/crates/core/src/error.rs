use thiserror::Error;

use crate::time::Timestamp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("time {requested} is before the first sample at {first}")]
    OutOfRange {
        requested: Timestamp,
        first: Timestamp,
    },

    #[error("no forecast issued at or before {0}")]
    NoForecast(Timestamp),

    #[error("{path}: row {row}: {reason}")]
    Ingestion {
        path: String,
        row: usize,
        reason: String,
    },

    #[error("subsystem `{id}` failed: {source}")]
    Subsystem {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn ingestion(path: impl Into<String>, row: usize, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            row,
            reason: reason.into(),
        }
    }
}
