use thiserror::Error;

/// Errors produced by the library's numeric and training operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty reduction axis set")]
    EmptyReduction,

    #[error("invalid axis set: {0}")]
    InvalidAxes(String),

    #[error("channel count {channels} is not divisible by group count {groups}")]
    IndivisibleGroups { channels: usize, groups: usize },

    #[error("permutation of zero elements")]
    EmptyPermutation,

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("backward called without a cached train-mode forward")]
    BackwardWithoutForward,

    #[error("variance + epsilon is not positive ({0})")]
    DegenerateVariance(f64),

    #[error("task stream is empty or a task has no data")]
    EmptyTask,

    #[error("strategy requires replay memory but capacity is 0")]
    NoMemory,

    #[error("not enough base data: need {needed}, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("stacks differ structurally: {0}")]
    StructuralMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
