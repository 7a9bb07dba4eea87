use std::path::Path;

use icst_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, IcstError>;

#[derive(Debug, Error)]
pub enum IcstError {
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{what} {index} out of range (size {size})")]
    Range {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("incompatible checkpoint: expected config hash {expected}, found {found}")]
    Incompatible { expected: String, found: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl IcstError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.display().to_string(),
            source,
        }
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| IcstError::io(path, e))
}

pub(crate) fn write_string(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| IcstError::io(path, e))
}
