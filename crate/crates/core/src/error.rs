use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate vector: zero L2 norm")]
    DegenerateVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("all label positions are masked")]
    AllMasked,
    #[error("embedding row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("negative loss component `{0}`")]
    NegativeComponent(&'static str),
    #[error("non-finite loss in component `{component}` at task {task}, epoch {epoch}, step {step}")]
    NonFinite { component: &'static str, task: usize, epoch: u32, step: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("split error: {0}")]
    Split(String),
    #[error("undefined forgetting: score after first training is zero")]
    UndefinedForgetting,
    #[error("incomplete metric matrix, missing: {0}")]
    IncompleteMatrix(String),
    #[error("sampling temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
