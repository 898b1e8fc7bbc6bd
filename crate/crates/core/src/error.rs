use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("marginal covariance is not positive definite (sigma2 = {sigma2})")]
    NotPositiveDefinite { sigma2: f64 },

    #[error("all {proposals} importance weights are zero")]
    DegenerateWeights { proposals: usize },

    #[error("non-finite value for {parameter} at iteration {iteration} of chain {chain}")]
    NonFinite {
        parameter: &'static str,
        chain: usize,
        iteration: usize,
    },

    #[error("proposal cache was built for store {cache}, but the store digest is {store}")]
    StaleCache { cache: String, store: String },

    #[error("patient {0:?} is not in the posterior store")]
    UnknownPatient(String),

    #[error("integration grid too coarse: {coarse} vs {fine} (tolerance {tolerance})")]
    GridPrecision {
        coarse: f64,
        fine: f64,
        tolerance: f64,
    },

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
