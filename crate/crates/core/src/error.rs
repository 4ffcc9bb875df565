use thiserror::Error;

/// Errors produced by the library.
///
/// Numerical payloads are stored as `f64` so the type is independent of the
/// scalar the computation ran in.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {message} (residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    /// The coupling is too strong for the mean-field map to stay a
    /// diffeomorphism (or a comparable regime bound is violated).
    #[error("coupling regime error: {message} (offending value {value}, bound {bound})")]
    Regime {
        message: String,
        value: f64,
        bound: f64,
    },

    #[error("non-contraction: step ratio {ratio} >= 1 sustained for {steps} steps")]
    NonContraction { steps: usize, ratio: f64 },

    #[error("spectral gap error: {0}")]
    SpectralGap(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
