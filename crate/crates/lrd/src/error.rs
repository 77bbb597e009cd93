use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("token id {id} out of range (vocab {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("decode did not converge: {open} positions still open after {steps} steps")]
    NonConvergence { open: usize, steps: usize },

    #[error("evidence inconsistent with distribution support (zero posterior mass)")]
    InconsistentEvidence,

    #[error("enumerable support too large: {size} sequences (limit {limit})")]
    SupportTooLarge { size: usize, limit: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
