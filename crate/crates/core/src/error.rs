use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix has rank ≤ 1, so no unique nearest rotation exists.
    #[error("cannot project a rank-deficient matrix onto SO(3) (singular values {0:?})")]
    DegenerateRotation([f64; 3]),

    #[error("degenerate point configuration: {0}")]
    DegenerateGeometry(&'static str),

    #[error("singular normal equations in translation averaging")]
    SingularSystem,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("frame {0} is already merged")]
    AlreadyMerged(usize),

    #[error("{what} count mismatch: {left} vs {right}")]
    CountMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
