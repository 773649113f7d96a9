use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration.
    Usage,
    /// Non-finite values, divergence, inconsistent dimensions.
    Numeric,
    /// Filesystem or file-format failures.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    IoStream(#[from] std::io::Error),
    #[error("malformed PFM header: {0}")]
    PfmHeader(String),
    #[error("grayscale PFM (\"Pf\") files are not supported")]
    PfmGrayscale,
    #[error("invalid PFM dimensions {width}x{height}")]
    PfmDimensions { width: usize, height: usize },
    #[error("truncated PFM payload: expected {expected} bytes, found {found}")]
    PfmTruncated { expected: usize, found: usize },
    #[error("bad {what} file: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("image decode failed: {0}")]
    Image(#[from] image::ImageError),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("log range is degenerate (constant image, log value {0})")]
    DegenerateRange(f64),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::IoStream(_)
            | Error::PfmHeader(_)
            | Error::PfmGrayscale
            | Error::PfmDimensions { .. }
            | Error::PfmTruncated { .. }
            | Error::Format { .. }
            | Error::Image(_) => ErrorKind::Io,
            Error::Config(_) => ErrorKind::Usage,
            Error::InvalidImage(_)
            | Error::Dimension(_)
            | Error::DegenerateRange(_)
            | Error::NonFinite(_)
            | Error::Divergence { .. } => ErrorKind::Numeric,
        }
    }
}
