use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shrinking by {margin} empties the region (inradius {inradius})")]
    EmptyShrink { margin: f64, inradius: f64 },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("expression error at byte {pos}: {msg}")]
    Expression { pos: usize, msg: String },
    #[error("operation needs a gradient potential but the field has none")]
    MissingPotential,
    #[error("trajectory left the bounding box at t = {time}")]
    OutOfDomain { time: f64, point: Vec<f64> },
    #[error("linear solve failed at step {step} (residual {residual:e})")]
    SolverFailure { step: usize, residual: f64 },
    #[error("invalid annulus: {0}")]
    InvalidAnnulus(String),
    #[error("exponent {max_exponent} exceeds the overflow guard; use a larger epsilon or rescale f")]
    Scale { max_exponent: f64 },
    #[error("observation form is not definite: {0}")]
    DegenerateObservation(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("undefined constant: {0}")]
    UndefinedConstant(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
