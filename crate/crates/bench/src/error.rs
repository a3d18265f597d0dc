use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Kernel(#[from] odl_kernels::Error),

    #[error("correctness gate failed for {case}: {detail}")]
    Gate { case: String, detail: String },

    #[error("at least 3 repetitions are required, got {0}")]
    TooFewReps(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

pub(crate) fn gate_failure(case: impl Into<String>, detail: impl Into<String>) -> BenchError {
    BenchError::Gate { case: case.into(), detail: detail.into() }
}
