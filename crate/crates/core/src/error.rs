use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },

    #[error("channel mismatch: layer has {expected} channels, input has {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("train-mode batch normalization needs at least 2 samples, got {got}")]
    BatchTooSmall { got: usize },

    #[error("operation {op} is not allowed in mode {mode}")]
    ModeViolation { op: &'static str, mode: String },

    #[error("affine snapshot layout does not match the model: {0}")]
    LayoutMismatch(String),

    #[error("self-supervised head does not match the requested task: {0}")]
    HeadMismatch(String),

    #[error("BYOL loss requested but the model has no target network")]
    MissingTarget,

    #[error("rotation requires square spatial dims, got {h}x{w}")]
    NonSquare { h: usize, w: usize },

    #[error("support set is empty")]
    EmptySupport,

    #[error("scope violation: {0}")]
    ScopeViolation(String),

    #[error("meta batch is empty")]
    EmptyMetaBatch,

    #[error("data exhausted: {0}")]
    DataExhausted(String),

    #[error("training diverged at {phase} epoch {epoch}")]
    DivergenceDetected { phase: &'static str, epoch: usize },

    #[error("need at least {needed} target domains, got {got}")]
    TooFewDomains { needed: usize, got: usize },

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),

    #[error("domain {domain} has {available} samples, {requested} requested")]
    InsufficientSamples { domain: u32, available: usize, requested: usize },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }
}
