use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {0:?} has no gradient")]
    MissingGradient(String),

    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: u32,
        step: u64,
        detail: String,
    },

    #[error("malformed PGM {path}: {detail}")]
    MalformedPgm { path: PathBuf, detail: String },

    #[error("image {image} is {image_dims:?} but mask {mask} is {mask_dims:?}")]
    MaskDimensions {
        image: PathBuf,
        mask: PathBuf,
        image_dims: (usize, usize),
        mask_dims: (usize, usize),
    },

    #[error("mask {path} has non-binary value {value} at pixel {index}")]
    NonBinaryMask {
        path: PathBuf,
        value: u8,
        index: usize,
    },

    #[error("domain {0} is missing from the corpus")]
    MissingDomain(u8),

    #[error("partition {0} is empty")]
    EmptyPartition(&'static str),

    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 8]),

    #[error("checkpoint: unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint: {0}")]
    CheckpointLayout(String),

    #[error("manifest {path} line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
