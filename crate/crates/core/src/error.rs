use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SteerError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SteerError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("SPT parse error at line {line}: {message}")]
    SptParse { line: usize, message: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        lr: f64,
        loss: f64,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("vocabulary skew: {what} is {found}, manifest expects {expected}")]
    VocabSkew {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Nn(#[from] steer_nn::NnError),
}

impl SteerError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<io::Error> for SteerError {
    fn from(source: io::Error) -> Self {
        Self::io("I/O", source)
    }
}
