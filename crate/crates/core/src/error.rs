use thiserror::Error;

pub type Result<T> = std::result::Result<T, CammError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CammError {
    /// A transformation step received an input outside its domain.
    #[error("domain violation in warp step {step} ({kind}) at sample {index}: input {value}")]
    DomainViolation {
        step: usize,
        kind: &'static str,
        index: usize,
        value: f64,
    },
    #[error("non-finite value at sample {index} after warp step {step}")]
    NonFinite { step: usize, index: usize },
    #[error("non-positive derivative at sample {index} (warp step {step})")]
    NonPositiveDerivative { step: usize, index: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("fixed-effect design is rank deficient (collinear columns)")]
    RankDeficient,
    #[error("singular linear system: {0}")]
    Singular(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unknown id '{0}'")]
    UnknownId(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("optimizer failure: {0}")]
    Optimizer(String),
}
