use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("modality `{tag}` declared in header but {path} is missing")]
    MissingModality { tag: String, path: PathBuf },

    #[error("{path}: expected {expected} bytes, found {found}")]
    ByteCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in modality `{tag}` at flat index {index}")]
    NonFiniteData { tag: String, index: usize },

    #[error("duplicate modality tag `{0}`")]
    DuplicateModality(String),

    #[error("unknown modality tag `{0}`")]
    UnknownModality(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label value {value} at flat index {index} is not one of 0..=3")]
    UnknownLabel { value: u8, index: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("refiner failure: {0}")]
    Refiner(String),

    #[error("gradient requested for non-scalar output of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0}")]
    Data(String),

    #[error("{} already exists and is not empty (pass --force to overwrite)", .0.display())]
    OutputExists(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Whether this error stems from user configuration rather than data or runtime.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::OutputExists(_))
    }

    /// Whether this error stems from malformed or inconsistent input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::MissingModality { .. }
                | Error::ByteCount { .. }
                | Error::NonFiniteData { .. }
                | Error::DuplicateModality(_)
                | Error::UnknownModality(_)
                | Error::InvalidHeader(_)
                | Error::UnknownLabel { .. }
                | Error::Empty(_)
                | Error::Data(_)
                | Error::Json { .. }
                | Error::ShapeMismatch { .. }
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
