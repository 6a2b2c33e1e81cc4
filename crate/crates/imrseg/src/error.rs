//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Errors produced by any stage of the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Tensor/image dimensions do not line up. The message names the
    /// operation and the offending shapes.
    Shape(String),
    /// Invalid configuration (bad enum value, indivisible channel counts,
    /// even kernels, exhausted folds, ...).
    Config(String),
    /// A class label the provider has no embedding for.
    UnknownClass(String),
    /// The provider cannot perform the requested operation
    /// (e.g. gradients on a precomputed-import provider).
    Capability(String),
    /// Input values outside the operation's documented domain.
    Domain(String),
    /// Episode sampling could not be satisfied (e.g. class with < K+1 records).
    Sampling(String),
    /// On-disk data is malformed; names the file.
    DataFormat { path: PathBuf, message: String },
    /// Underlying I/O failure, with the path that was being touched.
    Io { path: PathBuf, source: std::io::Error },
    /// Training hit a non-finite loss; carries the offending episode id.
    NonFiniteLoss { episode: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::UnknownClass(label) => write!(f, "unknown class label: {label:?}"),
            Error::Capability(msg) => write!(f, "capability error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Sampling(msg) => write!(f, "sampling error: {msg}"),
            Error::DataFormat { path, message } => {
                write!(f, "malformed data in {}: {message}", path.display())
            }
            Error::Io { path, source } => {
                write!(f, "i/o error on {}: {source}", path.display())
            }
            Error::NonFiniteLoss { episode } => {
                write!(f, "non-finite loss while training on episode {episode}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::DataFormat { path: path.into(), message: message.into() }
    }

    /// True for errors a CLI should report as usage/config problems (exit 2)
    /// rather than runtime failures (exit 1).
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownClass(_) | Error::Domain(_) | Error::Capability(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
