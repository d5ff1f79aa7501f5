use std::io;

/// Errors produced anywhere in the obfuscation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not match data length {len}")]
    InvalidTensor { shape: Vec<usize>, len: usize },

    #[error("activation trace does not belong to this network: {0}")]
    TraceMismatch(String),

    #[error("gradient set is not aligned with the network: {0}")]
    GradientMismatch(String),

    #[error("label out of range: {0}")]
    LabelOutOfRange(u8),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("idx: {0}")]
    Idx(String),

    #[error("model format: {0}")]
    Format(String),

    #[error("fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("bundle must contain at least one network")]
    EmptyBundle,

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f32 },

    #[error("training instance {instance}: {source}")]
    Instance {
        instance: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("coordinator rejected the request (status {0})")]
    Rejected(u8),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
