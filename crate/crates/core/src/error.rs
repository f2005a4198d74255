//! Error types shared across the crate.

use std::fmt;
use std::io;

/// Unified error type. Variants map onto the CLI exit-code classes:
/// data/format problems exit 2, internal invariant violations exit 3.
#[derive(Debug)]
pub enum Error {
    /// Malformed or unrecognized file contents.
    Format(String),
    /// Underlying I/O failure.
    Io(io::Error),
    /// Array/tensor shape disagreement between operands.
    Shape(String),
    /// Invalid configuration or precondition violation.
    Config(String),
    /// Index or surface value outside the valid range.
    Bounds(String),
    /// Metric undefined for the given inputs (e.g. single-class AUC).
    UndefinedMetric(String),
    /// An internal invariant was violated; indicates a bug.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Bounds(m) => write!(f, "bounds error: {m}"),
            Error::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            Error::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
macro_rules! bounds_err {
    ($($arg:tt)*) => { $crate::error::Error::Bounds(format!($($arg)*)) };
}

pub(crate) use {bounds_err, config_err, format_err, shape_err};
