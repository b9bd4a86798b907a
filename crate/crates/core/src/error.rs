use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by dataset handling, inference, training and the environments.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid record at line {line}: {}", violations.join("; "))]
    InvalidRecord { line: usize, violations: Vec<String> },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("target does not match {head} head")]
    HeadTarget { head: &'static str },

    #[error("option index {index} out of range for {count} options")]
    OptionIndex { index: usize, count: usize },

    #[error("likelihood underflow at step {step}: no latent path has positive probability")]
    Underflow { step: usize },

    #[error("non-finite gradient entry at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("enumeration too large: T={steps}, K={latent} (limit T<=8, K<=4)")]
    TooLarge { steps: usize, latent: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("clustering failed: {0}")]
    Cluster(String),

    #[error("non-finite policy output at step {step}")]
    NonFinitePolicy { step: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}
