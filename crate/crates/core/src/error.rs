use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A user callback produced NaN or an infinite value.
    #[error("non-finite evaluation: {0}")]
    Evaluation(String),

    #[error("argument outside the domain: {0}")]
    Domain(String),

    /// The truncated chain is not irreducible.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("chain is not ergodic: {0}")]
    Ergodicity(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Switching probability per step exceeded the guard; the caller must sub-divide.
    #[error("switching rate {rate} times dt {dt} exceeds the per-step guard {guard}")]
    SwitchGuard { rate: f64, dt: f64, guard: f64 },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("no surviving paths: {exited} of {total} exited the ball")]
    NoSurvivingPaths { exited: usize, total: usize },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
