//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume file {path}: {reason}")]
    MalformedVolume { path: PathBuf, reason: String },

    #[error("non-3D data: {path} has {ndim} dimensions")]
    NonVolumetric { path: PathBuf, ndim: usize },

    #[error("shape mismatch: {context} ({left:?} vs {right:?})")]
    ShapeMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("unmapped source labels {labels:?}; extend the remap table")]
    UnmappedLabels { labels: Vec<i32> },

    #[error("no valid patch placement after {attempts} consecutive rejections")]
    PatchRejectionBudget { attempts: usize },

    #[error("empty mask: {context}")]
    EmptyMask { context: String },

    #[error("no atrophy present: pre/post tissue labels are identical")]
    NoAtrophy,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss component {name} = {value}")]
    NonFiniteLoss { name: String, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config validation failed:\n{}", .0.join("\n"))]
    ConfigValidation(Vec<String>),

    #[error("stage runtime error: {0}")]
    Stage(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape_mismatch(context: &str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Exit code contract: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigValidation(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}
