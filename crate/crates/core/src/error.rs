use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants map onto the CLI exit codes via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed archive: {0}")]
    Parse(String),

    #[error("archive integrity violated: {0}")]
    Integrity(String),

    #[error("tensor `{0}` not found")]
    NotFound(String),

    #[error("unsupported dtype {dtype} for tensor `{layer}`")]
    UnsupportedDtype { layer: String, dtype: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dtype mismatch: {0}")]
    Dtype(String),

    #[error("layer sets differ: {0}")]
    Schema(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need at least {needed} inputs, got {got}")]
    Arity { needed: usize, got: usize },

    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("spectral gap is zero at k = {k}")]
    Gap { k: usize },

    #[error("ratio {ratio} at token {index} lies outside [1 - eps, 1 + eps] with eps = {epsilon}")]
    ClipViolation {
        index: usize,
        ratio: f64,
        epsilon: f64,
    },

    #[error("{} configuration problem(s):\n  - {}", .0.len(), .0.join("\n  - "))]
    ConfigList(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 3 for I/O and archive problems, 2 for everything
    /// else (bad configuration or inputs that cannot be analyzed). Exit code 1
    /// is reserved for successful runs whose findings include bound violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse(_)
            | Error::Integrity(_)
            | Error::NotFound(_)
            | Error::UnsupportedDtype { .. } => 3,
            _ => 2,
        }
    }
}
