use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The local solver produced a non-finite iterate. `last` holds the last
    /// finite decision vector (flattened `[u, u_s]`).
    #[error("solver diverged after {iterations} iterations")]
    Diverged { iterations: usize, last: Vec<f64> },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("stale forward cache: params at version {params}, cache from version {cache}")]
    StaleCache { params: u64, cache: u64 },

    #[error("gradient check failed: max relative error {max_rel_error:e} exceeds {tolerance:e}")]
    GradCheck { max_rel_error: f64, tolerance: f64 },

    #[error("malformed file at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("operation undefined: {0}")]
    Undefined(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
