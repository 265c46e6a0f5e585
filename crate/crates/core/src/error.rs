use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: unsupported label `{label}` (binary labels only)")]
    UnsupportedLabel { line: usize, label: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// A non-finite value showed up during optimization. `iterate` holds the
    /// point at which it was produced.
    #[error("numerical failure: {msg}")]
    Numerical { msg: String, iterate: Vec<f64> },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transport error with worker {worker}: {msg}")]
    Transport { worker: usize, msg: String },

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("step {step} failed: {source}")]
    Step {
        step: u8,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: u8) -> Error {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step { step, source: Box::new(e) },
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
