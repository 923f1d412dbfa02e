use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index out of range in {what}: {index} >= {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("vertex {vertex} has no incident non-degenerate triangle (zero normal)")]
    ZeroNormal { vertex: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("non-finite loss at iteration {iteration} of stage `{stage}`")]
    NonFinite { stage: String, iteration: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported asset format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checksum mismatch in chunk `{chunk}`")]
    Checksum { chunk: String },

    #[error("truncated or mis-sized data for `{what}`: expected {expected} bytes, found {found}")]
    Truncated {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("model invariant violated: {0}")]
    Invariant(String),

    #[error("malformed {format} input: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }

    /// Short machine-readable tag used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::Validation(_) => "validation",
            Error::ZeroNormal { .. } => "zero_normal",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Checksum { .. } => "checksum",
            Error::Truncated { .. } => "truncated",
            Error::Invariant(_) => "invariant",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
