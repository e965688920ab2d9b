use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: line {line}: duplicate passage id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("conversation {cid} missing turn {missing}")]
    TurnGap { cid: String, missing: usize },

    #[error("invalid gold answer for {cid} turn {turn}: {message}")]
    InvalidGold {
        cid: String,
        turn: usize,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty token sequence")]
    EmptyTokens,

    #[error("query budget {budget} cannot hold current question of {needed} tokens")]
    BudgetTooSmall { budget: usize, needed: usize },

    #[error("missing {what}")]
    Missing { what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad model or index file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn missing(what: impl Into<String>) -> Self {
        Error::Missing { what: what.into() }
    }

    pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, actual })
        }
    }
}
