use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive definite (pivot {pivot} at index {index})")]
    NotSpd { index: usize, pivot: f64 },
    #[error("need at least 2 draws, got {0}")]
    TooFewDraws(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("weighted design matrix is rank deficient")]
    RankDeficient,
    #[error("solver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("only {rows} positive-weight rows for {dim} parameters")]
    InsufficientData { rows: usize, dim: usize },
    #[error("operation not supported for {0} estimator")]
    UnsupportedKind(&'static str),
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("tuning denominator for coordinate {0} is degenerate")]
    DegenerateDenominator(usize),
    #[error("bootstrap needed more than {limit} redraws")]
    TooManyRedraws { limit: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing or non-finite value in row {row}, column {column}")]
    MissingValue { row: usize, column: usize },
}

impl Error {
    /// Numerical failures as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotSpd { .. }
                | Error::RankDeficient
                | Error::NoConvergence { .. }
                | Error::DegenerateDenominator(_)
                | Error::TooManyRedraws { .. }
        )
    }
}
