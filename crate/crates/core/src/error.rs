use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite state at t = {t} (step too large or Riccati blow-up)")]
    NonFinite { t: f64 },

    #[error("series live on different grids")]
    GridMismatch,

    #[error("need at least {needed} paths, got {got}")]
    TooFewPaths { needed: usize, got: usize },

    #[error("memory kernel is not zero (max |G~| = {max:e}); use solve_p")]
    NonZeroKernel { max: f64 },

    #[error("{divergent} of {total} trajectories diverged (limit 1%)")]
    TooManyDivergent { divergent: usize, total: usize },
}
