use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor `{name}`: checkpoint shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("non-finite loss {value} at image {image_id}: {detail}")]
    NonFinite {
        image_id: usize,
        value: f64,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("duplicate category name `{0}`")]
    DuplicateName(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("dataset has no labeled images for class-aware sampling")]
    NoLabels,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
