use thiserror::Error;

/// Errors raised across the alignment toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("matrix is not symmetric (max relative deviation {deviation:.3e})")]
    Asymmetric { deviation: f64 },

    #[error("NotPositiveDefinite: {0}")]
    NotPositiveDefinite(String),

    #[error("ConvergenceFailure: {0}")]
    ConvergenceFailure(String),

    #[error("NonFinite: {0}")]
    NonFinite(String),

    #[error("SinkhornStall: marginal error {error:.3e} after {sweeps} sweeps (epsilon too small for double precision?)")]
    SinkhornStall { sweeps: usize, error: f64 },

    #[error("DimensionTooLarge: exhaustive search needs d <= {max}, got {d}")]
    DimensionTooLarge { d: usize, max: usize },

    #[error("RejectionBudgetExceeded: no Rademacher draw accepted in {draws} attempts (c1 too small?)")]
    RejectionBudgetExceeded { draws: usize },

    #[error("BudgetExceeded: sample size would exceed cap {cap}")]
    BudgetExceeded { cap: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("FileFormat: {0}")]
    FileFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used in JSON error documents and CSV status fields.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidPermutation(_) => "InvalidPermutation",
            Error::Asymmetric { .. } => "Asymmetric",
            Error::NotPositiveDefinite(_) => "NotPositiveDefinite",
            Error::ConvergenceFailure(_) => "ConvergenceFailure",
            Error::NonFinite(_) => "NonFinite",
            Error::SinkhornStall { .. } => "SinkhornStall",
            Error::DimensionTooLarge { .. } => "DimensionTooLarge",
            Error::RejectionBudgetExceeded { .. } => "RejectionBudgetExceeded",
            Error::BudgetExceeded { .. } => "BudgetExceeded",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::FileFormat(_) => "FileFormat",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
