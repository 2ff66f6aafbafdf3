//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left} vs {right}")]
    ShapeMismatch {
        context: String,
        left: String,
        right: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("power iteration did not converge after {iters} iterations (last gap {gap:e})")]
    NoConvergence { iters: usize, gap: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error at line {line}{}: {msg}", col.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        line: usize,
        col: Option<usize>,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 bad data, 2 bad config, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Empty(_) | Error::ShapeMismatch { .. } => 1,
            Error::Config(_) | Error::Unsupported(_) | Error::Io(_) => 2,
            Error::NonFinite { .. } | Error::NoConvergence { .. } | Error::Diverged { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
