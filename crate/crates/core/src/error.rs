use std::path::{Path, PathBuf};

use cbm_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid model configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("grid of {requested} runs exceeds the limit of {limit}")]
    ResourceCap { requested: usize, limit: usize },
}

impl CoreError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
