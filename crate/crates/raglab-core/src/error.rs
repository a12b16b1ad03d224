use thiserror::Error;

/// Unified error type for the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward called on an already-consumed tape")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("token id {id} out of vocabulary (V={vocab})")]
    OutOfVocab { id: u32, vocab: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("missing gradient for trainable parameter {0}")]
    MissingGrad(String),

    #[error("schedule step {step} beyond total {total}")]
    ScheduleStep { step: u64, total: u64 },

    #[error("invalid channel: {0}")]
    Channel(String),

    #[error("invalid quantizer: {0}")]
    Quantizer(String),

    #[error("KL divergence undefined: q=0 where p>0 (index {0})")]
    AbsoluteContinuity(usize),

    #[error("dual-route check diverged: {0}")]
    RouteMismatch(String),

    #[error("quantizers are not nested; ordering not guaranteed")]
    NonNested,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("bad magic bytes (not a {expected} file)")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: file corrupted")]
    Checksum,

    #[error("file truncated")]
    Truncated,

    #[error("bank provenance does not match query-side encoders: {0}")]
    ProvenanceMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss became non-finite at step {step}; aborting run")]
    NanLoss { step: u64 },

    #[error("invalid task spec: {0}")]
    TaskSpec(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
