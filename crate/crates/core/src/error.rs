use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the speculative decoding lab.
#[derive(Debug, Error)]
pub enum SpecparError {
    #[error("degenerate distribution")]
    DegenerateDistribution,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("draft mass zero on emitted token {0}")]
    ZeroDraftMass(u32),

    #[error("residual distribution is identically zero")]
    ZeroResidual,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no rejection ever occurs (alpha^gamma = 1)")]
    NoRejection,

    #[error("pipeline invariant violated: {0}")]
    Invariant(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
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

impl SpecparError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpecparError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        SpecparError::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SpecparError>;
