use thiserror::Error;

#[derive(Debug, Error)]
pub enum SgfError {
    #[error("grid too small: {nx}x{ny}, need at least 9x9 for the stencils")]
    GridTooSmall { nx: usize, ny: usize },

    #[error("fields live on different grids ({0})")]
    GridMismatch(&'static str),

    #[error("operation requires {expected} boundary tag, got {got}")]
    BcMismatch { expected: &'static str, got: &'static str },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("{what} did not converge after {iters} iterations (residual {residual:e})")]
    NonConvergence { what: &'static str, iters: usize, residual: f64 },

    #[error("noise mode index {index} out of range (K = {modes})")]
    NoiseIndex { index: usize, modes: usize },

    #[error("trajectory blew up at t = {t} (step {step})")]
    BlowUp { t: f64, step: usize },

    #[error("CFL violation: dt*max|u|/h = {cfl}, limit 0.5")]
    CflViolation { cfl: f64 },

    #[error("boundary layer under-resolved: delta = {delta} < 4h = {min}")]
    LayerUnderResolved { delta: f64, min: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SgfError>;
