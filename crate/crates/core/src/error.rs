//! Crate-wide error type.

use std::fmt;

use crate::store::OfflineTrajectory;

/// Errors surfaced by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A shape precondition failed; names the offending quantity.
    DimMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A value precondition failed (bad count, label out of range, ...).
    InvalidArgument(String),
    /// A computation produced NaN/Inf where a finite value is required.
    NonFinite(String),
    /// Trajectory recording hit a non-finite loss; carries the finite prefix
    /// recorded so far for diagnosis.
    Diverged {
        step: usize,
        prefix: Box<OfflineTrajectory>,
    },
    /// A binary file failed to parse; `offset` is the byte position.
    Parse { offset: u64, message: String },
    /// Filesystem failure, stringified (keeps the error type cloneable).
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch {
                context,
                expected,
                actual,
            } => write!(f, "{context}: expected dim {expected}, got {actual}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Diverged { step, .. } => {
                write!(f, "training diverged at step {step} (finite prefix retained)")
            }
            Error::Parse { offset, message } => {
                write!(f, "parse error at byte {offset}: {message}")
            }
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
