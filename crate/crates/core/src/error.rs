use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty sample set")]
    Empty,

    /// A sample fell below the declared support lower bound.
    #[error("support violation: sample {index} has value {value} < lower bound {bound}")]
    SupportViolation {
        index: usize,
        value: f64,
        bound: f64,
    },

    #[error("weights are not uniform; resample before evaluating the bound")]
    NonUniformWeights,

    #[error("propagation diverged at particle {index}")]
    PropagationDiverged { index: usize },

    #[error("degenerate measurement update: likelihood sum is {sum}")]
    DegenerateUpdate { sum: f64 },

    #[error("no observation received yet; fall back to the mean state")]
    NoObservation,

    #[error("barrier `{0}` cannot be inflated into a Chebyshev-ball constraint")]
    NotInflatable(&'static str),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
