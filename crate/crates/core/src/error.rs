use thiserror::Error;

/// Errors surfaced by the solver, Galerkin algebra, and training paths.
///
/// Programming-contract violations (shape mismatches between arrays the
/// caller constructed) panic via assertions instead; these variants cover
/// failures a correct caller can still hit at run time.
#[derive(Debug, Error)]
pub enum Error {
    /// Quadrature, eigen-solve, or factorization breakdown.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Solution blow-up or non-finite state during time marching.
    #[error("blow-up at step {step}: {what}")]
    BlowUp { step: usize, what: String },

    /// Neumann/periodic Poisson right-hand side with a non-vanishing mean.
    #[error("incompatible Poisson right-hand side: mean integral {mean:e} exceeds {limit:e}")]
    Compatibility { mean: f64, limit: f64 },

    /// Training loss diverged or became non-finite.
    #[error("training failure: {0}")]
    Training(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
}
