use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or node shapes do not line up; the message names both shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Fewer inputs than an operation requires (e.g. fusing a single view).
    #[error("arity error: {0}")]
    Arity(String),

    /// Iterative solver ran out of sweeps.
    #[error("convergence error: {0}")]
    Convergence(String),

    /// Matrix expected to be positive semi-definite is not.
    #[error("not positive semi-definite: {0}")]
    NotPsd(String),

    /// Graph leaf evaluated before a value was bound to it.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// Batch too small for a batch-statistics measure (SIM/DCCA).
    #[error("batch too small: {0}")]
    BatchTooSmall(String),

    /// Training loss became non-finite.
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    /// Dataset content problem (row mismatch, bad file, missing class ...).
    #[error("data error: {0}")]
    Data(String),

    /// Configuration problem (bad method id, inapplicable parameter ...).
    #[error("config error: {0}")]
    Config(String),

    /// Metric undefined for the given labels (e.g. a single class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
