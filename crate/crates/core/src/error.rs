use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid tolerance {0}: must be positive")]
    InvalidTolerance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("structure not applicable: {0}")]
    StructureNotApplicable(String),
    #[error("invalid functional: {0}")]
    InvalidFunctional(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no solution: rank(stack(Upsilon; Theta)) = {augmented} but rank(Theta) = {theta}")]
    NoSolution { theta: usize, augmented: usize },
    #[error("no stabilizing gain: {0}")]
    NoStabilizer(String),
    #[error("assembly inconsistency: residual {residual:.3e} exceeds {limit:.0e}")]
    AssemblyInconsistency { residual: f64, limit: f64 },
    #[error("invalid delay: {0}")]
    InvalidDelay(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("ill-conditioned slack matrix: smallest singular value {sigma_min:.3e}")]
    Conditioning { sigma_min: f64, singular_values: Vec<f64> },
    #[error("step {dt} is not aligned with the delays; nearest valid step is {suggested}")]
    Alignment { dt: f64, suggested: f64 },
    #[error("no convergence: {0}")]
    Convergence(String),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
