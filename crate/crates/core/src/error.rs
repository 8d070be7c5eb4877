use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Array or network shapes do not chain or do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is outside its documented domain.
    #[error("invalid input: {0}")]
    Validation(String),

    /// An operation was called on an object in the wrong state.
    #[error("invalid state: {0}")]
    State(String),

    /// An iterative solver hit its iteration cap.
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A finite-difference probe landed too close to a ReLU kink.
    #[error("pre-activation {min_abs:e} is within {margin:e} of a ReLU kink; jitter the instance and retry")]
    KinkProximity { min_abs: f64, margin: f64 },

    /// A fit was requested on a series carrying no rate information.
    #[error("degenerate series: {0}")]
    Degenerate(String),

    /// Malformed archive or CSV input.
    #[error("format error: {0}")]
    Format(String),

    /// Experiment configuration problems, anchored to a line when possible.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}
