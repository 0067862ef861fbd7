use std::path::PathBuf;

use thiserror::Error;

use crate::tpp::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("sequence {id}: {rule}")]
    InvalidSequence { id: String, rule: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite objective in epoch {epoch} on batch [{}]", batch_ids.join(", "))]
    NonFiniteObjective {
        epoch: usize,
        batch_ids: Vec<String>,
        last_good: Box<Checkpoint>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than configuration or numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::InvalidSequence { .. } | Error::InvalidDataset(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::NonFiniteObjective { .. })
    }
}
