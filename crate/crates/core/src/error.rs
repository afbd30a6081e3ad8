use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, experiment or data configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller supplied data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Wire or session protocol violation. `offset` is the byte position inside
    /// the offending frame when known.
    #[error("protocol error at byte {offset}: {message}")]
    Protocol { offset: usize, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn protocol(offset: usize, msg: impl Into<String>) -> Self {
        Error::Protocol {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], found: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
