use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model parameter failed validation. `field` names the offending entry.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("ill-conditioned market: covariance condition estimate {condition:.3e} exceeds 1e12")]
    IllConditionedMarket { condition: f64 },

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("beta coefficient is singular: denominator vanishes at remaining time {blowup_time}")]
    SingularBeta { blowup_time: f64 },

    /// Consumption is unbounded at the terminal date (zero bequest weight).
    #[error("boundary singularity at t = {t}: zero bequest weight leaves no remaining horizon")]
    BoundarySingularity { t: f64 },

    #[error("fixed point did not converge after {iterations} iterations (last residual {last:.3e})", last = residuals.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { iterations: usize, residuals: Vec<f64> },

    #[error("coefficient lost positivity at t = {t} (value {value})")]
    PositivityViolation { t: f64, value: f64 },

    #[error("zero bequest weight is not supported by the power sophisticated solver")]
    UnsupportedTerminal,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("ODE integration failed: {0}")]
    Ode(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
