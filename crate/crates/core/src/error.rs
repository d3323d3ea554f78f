use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("numeric fault: {0}")]
    NumericFault(String),

    /// An argument lies outside the domain of the operation (e.g. a diffusion
    /// time outside `[0, 1]`).
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation was called on an object that cannot support it, such as
    /// asking a direct-score network for an energy.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("digest mismatch in {path}")]
    DigestMismatch { path: PathBuf },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by files on disk rather than by the numerics.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::DigestMismatch { .. }
                | Error::Malformed { .. }
                | Error::Io { .. }
        )
    }
}

/// Returns `Err(NumericFault)` naming `what` if any value is not finite.
pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericFault(format!(
            "{what}: non-finite value {} at index {pos}",
            values[pos]
        )));
    }
    Ok(())
}
