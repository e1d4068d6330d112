use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate rotation quaternion (norm {norm})")]
    DegenerateRotation { norm: f64 },

    #[error("non-finite upstream gradient at voxel {voxel}")]
    InvalidGradient { voxel: usize },

    #[error("invalid sample count: requested {requested} from {available} points")]
    InvalidSampleCount { requested: usize, available: usize },

    #[error("non-finite loss component: {which}")]
    InvalidLoss { which: &'static str },

    #[error("missing per-gaussian attribute: {0}")]
    MissingAttribute(&'static str),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("frame id {got} is not after {last}")]
    OutOfOrderFrame { got: u64, last: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty ray set")]
    EmptyRaySet,

    #[error("scene spec error: {0}")]
    SchemaError(String),

    #[error("optimization diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("benchmark needs at least 3 repetitions, got {0}")]
    InsufficientRepetitions(usize),

    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },

    #[error("unsupported format version {got} (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },

    #[error("truncated payload: needed {needed} more bytes")]
    Truncated { needed: usize },

    #[error("non-finite value in {field} of record {index}")]
    NonFinite { field: &'static str, index: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
