//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("pilot index ({l_p}, {k_p}) outside {m}x{n} grid")]
    PilotOutOfRange { l_p: usize, k_p: usize, m: usize, n: usize },

    #[error("bit count {got} does not match grid capacity {expected}")]
    BitCount { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("delay {tau:.3e} s exceeds unambiguous delay span {max:.3e} s")]
    RangeAmbiguity { tau: f64, max: f64 },

    #[error("requested {requested} paths but search grid holds only {capacity} points")]
    TooManyPaths { requested: usize, capacity: usize },

    #[error("reference signal has zero energy")]
    ZeroEnergy,

    #[error("gradient descent diverged at iteration {iteration} (|d| = {norm:.3e}); reduce the step size")]
    Divergence { iteration: usize, norm: f64 },

    #[error("nodes are collinear (normalized |det A| = {det:.3e})")]
    Collinear { det: f64 },

    #[error("degenerate bearing geometry (|det C| = {det:.3e})")]
    DegenerateBearing { det: f64 },

    #[error("empty estimate set")]
    Empty,

    #[error("monostatic (receiver 0) estimates are missing")]
    MissingMonostatic,

    #[error("innovation covariance is singular (condition number {condition:.3e})")]
    SingularInnovation { condition: f64 },

    #[error("no non-collinear layout found after {attempts} draws")]
    LayoutRejection { attempts: usize },

    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
