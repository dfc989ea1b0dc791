use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("support mismatch: {0}")]
    SupportMismatch(&'static str),

    #[error("unsupported transport problem: {0}")]
    UnsupportedTransport(String),

    #[error("mixing weight {0} outside [0, 1]")]
    MixOutOfRange(f64),

    #[error("query {query} expects {expected}")]
    Arity { query: &'static str, expected: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "intensity {value} exceeds dominating rate {bound} at t={t}, mean(m)={mean}, x={x}"
    )]
    IntensityDomination {
        t: f64,
        mean: f64,
        x: f64,
        value: f64,
        bound: f64,
    },

    #[error("declared bound {bound} violated by {name}={value} at x={x}")]
    BoundViolation {
        name: &'static str,
        value: f64,
        bound: f64,
        x: f64,
    },

    #[error("at least 2 particles required, got {0}")]
    TooFewParticles(usize),

    #[error("time {t} outside (0, {horizon}]")]
    HorizonExceeded { t: f64, horizon: f64 },

    #[error("driver cannot be realized on this path: {0}")]
    DriverUnrealized(String),

    #[error("driver is not measurable with respect to the common noise: {0}")]
    DriverNotCommon(String),

    #[error("state space of {states} configurations exceeds budget {budget}")]
    BudgetExceeded { states: usize, budget: usize },

    #[error("configuration off lattice: {0}")]
    OffLattice(String),

    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
