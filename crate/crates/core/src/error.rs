use std::path::PathBuf;

use crate::cluster::TraceRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates an invariant. `field` is the dotted
    /// path of the offending key, e.g. `policy.bits`.
    #[error("invalid config at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("corrupt quantized tensor: {0}")]
    Corrupt(String),

    /// The simulated cluster observed a state that a lossless BSP run can
    /// never produce. Always a harness bug.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("training diverged at iteration {iter} (non-finite loss)")]
    Diverged {
        iter: usize,
        partial: Box<Vec<TraceRecord>>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
