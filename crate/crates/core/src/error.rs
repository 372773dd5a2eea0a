use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("no valid placement after {attempts} attempts: placed {achieved} of {requested}")]
    NoValidPlacement {
        requested: usize,
        achieved: usize,
        attempts: usize,
    },

    #[error("patch at {start:?} (size {size}) has no gray-matter voxels")]
    EmptyPatch { start: [usize; 3], size: usize },

    #[error("cannot stratify into {folds} folds: class {class} has only {count} members")]
    Stratification {
        folds: usize,
        class: usize,
        count: usize,
    },

    #[error("AUC is undefined when only one class is present")]
    UndefinedAuc,

    #[error("bad magic number in {0}")]
    BadMagic(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("declared dimensions {0:?} overflow the addressable size")]
    DimOverflow(Vec<u64>),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
