//! Error type shared across the crate.
//!
//! Every error carries a stable category used by the CLI to pick an exit
//! code and print a single-line machine-parsable diagnostic.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape algebra violated; names the op and both shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (unknown architecture, bad attack budget, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset file could not be ingested; points at the offending byte.
    #[error("ingestion error at byte {offset}: {msg}")]
    Ingestion { offset: u64, msg: String },

    /// Checkpoint or container file rejected on load.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss term went non-finite.
    #[error("non-finite loss term {term}")]
    NonFiniteTerm { term: &'static str },

    /// Training aborted; coordinates locate the offending batch.
    #[error("training aborted: non-finite {term} at epoch {epoch}, batch {batch}")]
    TrainingAbort {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable category name, one per CLI exit code.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Ingestion { .. } | Error::Checkpoint(_) => "data",
            Error::ShapeMismatch { .. } | Error::Contract(_) => "contract",
            Error::NonFiniteTerm { .. } | Error::TrainingAbort { .. } => "training-abort",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
