use thiserror::Error;

/// Errors produced by every fallible operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("context overflow: {needed} positions requested, context length is {context}")]
    ContextOverflow { needed: usize, context: usize },

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("value {0} not representable as binary16")]
    Unrepresentable(f32),

    #[error("bad magic: expected \"SHKT\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload in {0}")]
    Truncated(String),

    #[error("payload mismatch in tensor {name}: {reason}")]
    PayloadMismatch { name: String, reason: String },

    #[error("checkpoint tensor set mismatch: {0}")]
    TensorSet(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
