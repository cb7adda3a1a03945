use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unsupported kernel {kh}x{kw}: kernel extents must be odd")]
    UnsupportedKernel { kh: usize, kw: usize },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("cross-attention needs at least one context token")]
    EmptyContext,
    #[error("attention matrix has {got} memory columns but the cache holds {expected} tokens")]
    StaleAttention { got: usize, expected: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("gradient oracle failure: {0}")]
    Oracle(String),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("cannot ingest {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by the filesystem or file contents rather
    /// than by invalid arguments.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Format { .. } | Error::Ingestion { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
