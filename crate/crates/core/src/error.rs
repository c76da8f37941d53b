use thiserror::Error;

pub type Result<T, E = KvecError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KvecError {
    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("arrival order violated: expected t={expected}, got t={got}")]
    ArrivalOrder { expected: usize, got: usize },

    #[error("causality violated: j={j} must precede i={i}")]
    Causality { i: usize, j: usize },

    #[error("index {index} out of range (length {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("softmax row {0} is fully masked")]
    FullyMasked(usize),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("gradient check failed: {0}")]
    GradientMismatch(String),

    #[error("non-finite loss at epoch {epoch}, tangled sequence {sequence}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        sequence: usize,
        detail: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("key `{0}` has no label")]
    MissingLabel(String),

    #[error("key `{0}` is already halted")]
    HaltedKey(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KvecError {
    /// Coarse class used for process exit codes and machine-readable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            KvecError::Config(_) => "usage",
            KvecError::NonFiniteGradient(_) | KvecError::NonFiniteLoss { .. } | KvecError::GradientMismatch(_) => "numerical",
            KvecError::Io(_) => "io",
            _ => "validation",
        }
    }
}
