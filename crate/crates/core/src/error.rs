use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("batch norm in batch-statistics mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("parameter {layer}/{name} has no gradient; run backward first")]
    MissingGradient { layer: usize, name: String },

    #[error("unsupported norm order p = {0}; expected one of 0, 0.5, 1, 2, 3, 4, 5, inf")]
    UnsupportedNorm(f64),

    #[error("unknown importance variant {0}; expected 1..=6")]
    UnknownVariant(u8),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("source training diverged at epoch {epoch} (loss is not finite); try a lower learning rate than {lr}")]
    TrainingDiverged { epoch: usize, lr: f64 },

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
