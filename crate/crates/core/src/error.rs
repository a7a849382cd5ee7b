//! Error taxonomy shared across the workspace.
//!
//! Variants are grouped by how a front end should react to them: configuration
//! problems are user-fixable before any data is touched, data problems point at
//! a concrete input artifact, and numeric failures mean the math went bad
//! (non-finite loss, failed gradient verification) and the run must not be
//! trusted.

use std::path::PathBuf;
use thiserror::Error;

/// Unified error type for the core library.
#[derive(Error, Debug)]
pub enum MrnError {
    /// Invalid configuration: bad dimensions, rates out of range, incompatible
    /// module settings. Detected before touching data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A tensor or token set had the wrong shape for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Problem with an input artifact: unreadable dataset, label id outside the
    /// merge table, sidecar/payload disagreement, non-finite input values.
    #[error("data error: {0}")]
    Data(String),

    /// The numerics failed: non-finite loss, gradient check above tolerance,
    /// degenerate normalization.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Filesystem-level failure, with the offending path.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MrnError {
    /// Attach a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MrnError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, MrnError>;
