use thiserror::Error;

/// Errors raised across the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("expression error: {0}")]
    Expr(#[from] crate::expr::ExprError),

    #[error("domain error: {0}")]
    Domain(String),

    /// A point lies outside the closed domain deeper than the tubular collar.
    #[error("point at signed distance {distance} lies outside the collar of width {width}")]
    Collar { distance: f64, width: f64 },

    #[error("assumption violated: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("diffusion matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("reflection direction is not inward (beta . n = {0})")]
    NonInwardReflection(f64),

    #[error("path escaped the boundary collar after {halvings} step halvings")]
    CollarEscape { halvings: u32 },

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
