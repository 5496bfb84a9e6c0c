use thiserror::Error;

/// Errors raised by model construction, quadrature and sampling.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid Levy density: {0}")]
    InvalidDensity(String),

    #[error("quadrature did not converge: log estimate {log_estimate}, relative error bound {rel_error} ({reason})")]
    Quadrature {
        log_estimate: f64,
        rel_error: f64,
        reason: String,
    },

    #[error("integrand returned NaN at {at}")]
    NanIntegrand { at: f64 },

    #[error("degenerate sampling grid: {0}")]
    DegenerateGrid(String),

    #[error("rejection sampler exceeded {0} attempts")]
    RejectionCap(usize),

    #[error("{0}")]
    TooLarge(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
