use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the numeric, clustering, scoring and conformal layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("response has an empty token log-prob list")]
    EmptyTokenList,
    #[error("empty input list")]
    EmptyList,
    #[error("non-finite score {0}")]
    NonFiniteScore(f64),
    #[error("index {index} out of range for {len} responses")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("alpha must be > 0, got {0}")]
    NonPositiveAlpha(f64),
    #[error("entailment matrix is {rows}x{cols} but there are {responses} responses")]
    MatrixShapeMismatch {
        rows: usize,
        cols: usize,
        responses: usize,
    },
    #[error("epsilon must lie in (0, 1), got {0}")]
    EpsilonOutOfRange(f64),
    #[error("record {0} has no correctness labels")]
    MissingLabels(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all items carry the same correctness label")]
    DegenerateLabels,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("need at least 2 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
