use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("moment vector is not identifiable: centered features never move along {null_direction:?} (residual {residual:.3e})")]
    NonIdentifiable {
        null_direction: Vec<f64>,
        residual: f64,
    },

    #[error("moment vector lies outside the marginal polytope (|theta| = {norm:.3e} exceeded the cap)")]
    NotInPolytope { norm: f64 },

    #[error("solver did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("feature value {value} at coordinate {coordinate} of outcome {outcome} lies outside [0, {bound}]")]
    BoundViolation {
        outcome: usize,
        coordinate: usize,
        value: f64,
        bound: f64,
    },

    #[error("privacy level alpha = 0 makes the debiasing map undefined")]
    DegeneratePrivacy,

    #[error("enumeration needs {terms} terms, over the budget of {budget}")]
    TooLarge { terms: u128, budget: u128 },

    #[error("randomized response with epsilon = 1 over {outcomes} outcomes has unbounded privacy loss")]
    InfinitePrivacyLoss { outcomes: usize },

    #[error("information matrix is singular (smallest eigenvalue {min_eigenvalue:.3e})")]
    SingularInformation { min_eigenvalue: f64 },

    #[error("matrix is singular or ill-conditioned (condition number {condition:.3e})")]
    Singular { condition: f64 },

    #[error("sequence of length {length} is too short for a window of {window}")]
    SequenceTooShort { length: usize, window: usize },

    #[error("region enumeration needs {configurations} label configurations, over the budget of {budget}")]
    RegionTooLarge { configurations: u128, budget: u128 },

    #[error("statistic {coordinate} was never observed")]
    MissingCoordinate { coordinate: usize },

    #[error("no data: {0}")]
    NoData(String),

    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(String),

    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
