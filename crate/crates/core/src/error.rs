use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint integrity: tensor `{tensor}` is {reason}")]
    Integrity { tensor: String, reason: String },

    #[error("checkpoint tensor `{tensor}` has shape {stored:?} but the config expects {expected:?}")]
    ParamShape {
        tensor: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
