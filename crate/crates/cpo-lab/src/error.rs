//! Crate-wide error type.
//!
//! Errors split into two classes mirrored by the CLI exit codes: validation
//! errors (bad configs, malformed files, contract violations by the caller,
//! exit code 1) and runtime errors (I/O failures and anything else that goes
//! wrong mid-run, exit code 2).

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("sequence of {len} tokens exceeds the model context of {max_context}")]
    ContextOverflow { len: usize, max_context: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid ranking: {0}")]
    InvalidRanking(String),

    #[error("batch of {have} pairs cannot supply {need} distinct other continuations")]
    InsufficientBatch { have: usize, need: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("enumeration of {0} sequences exceeds the 1e6 guard")]
    SpaceTooLarge(u64),

    #[error("enumerated support covers only {mass} of the {which} distribution")]
    MassDeficit { which: &'static str, mass: f64 },

    #[error("policy places mass on support element {0} where the reference has none")]
    SupportViolation(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors the user caused (bad flags, malformed configs or data
    /// files, violated preconditions). The CLI maps these to exit code 1 and
    /// everything else to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidSequence(_)
                | Error::ContextOverflow { .. }
                | Error::ShapeMismatch(_)
                | Error::InvalidRanking(_)
                | Error::InsufficientBatch { .. }
                | Error::Parse { .. }
                | Error::Checkpoint { .. }
                | Error::SpaceTooLarge(_)
        )
    }
}
