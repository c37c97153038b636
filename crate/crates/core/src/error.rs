use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("grid dimensions differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),

    #[error("target label {label} at voxel {voxel} is not a valid training target")]
    InvalidTarget { voxel: usize, label: u8 },

    #[error("observation mask is empty")]
    EmptyObservation,

    #[error("no class has a non-zero IoU denominator")]
    NoEvaluatedClasses,

    #[error("frame {frame} out of range for trajectory of length {len}")]
    FrameOutOfRange { frame: usize, len: usize },

    #[error("could not place {what} after {attempts} attempts")]
    PlacementFailed { what: String, attempts: usize },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
