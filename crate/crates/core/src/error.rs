use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("inconsistent network spec: {0}")]
    Spec(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("class count error: {0}")]
    ClassCount(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown layer `{name}`; valid layers are: {}", valid.join(", "))]
    Lookup { name: String, valid: Vec<String> },

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("{}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("stale cache in {}: stored config hash {stored} does not match {expected}", dir.display())]
    StaleCache {
        dir: PathBuf,
        stored: String,
        expected: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numeric blow-up (NaN or infinity).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    /// True for errors caused by the caller's configuration rather than data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
