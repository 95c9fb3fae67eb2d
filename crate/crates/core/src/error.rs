use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("market must have at least one agent")]
    ZeroAgents,
    #[error("market is empty")]
    EmptyMarket,
    #[error("{what} must be non-negative, got {value}")]
    Negative { what: &'static str, value: f64 },
    #[error("money and goods have different lengths ({money} vs {goods})")]
    LengthMismatch { money: usize, goods: usize },
    #[error("functional expects {expected} agents but the state has {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("need at least {required} agents, have {actual}")]
    TooFewAgents { required: usize, actual: usize },
    #[error("direct quadrature supports at most {max} agents, got {actual}")]
    TooManyAgents { max: usize, actual: usize },
    #[error("quadrature error estimate {estimate:e} exceeds tolerance {tolerance:e}")]
    UnmetTolerance { estimate: f64, tolerance: f64 },
    #[error("series did not converge: {0}")]
    NonConvergent(String),
    #[error("goods do not sum to the fixed volume: sum {sum}, volume {volume}")]
    SimplexViolated { sum: f64, volume: f64 },
    #[error("need at least {required} samples, have {actual}")]
    InsufficientSamples { required: usize, actual: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("incompatible ensemble and dynamics: {0}")]
    Incompatible(String),
    #[error("sweep too fast: autocorrelation time {tau} is {ratio:.3} of the stage length (limit 0.1)")]
    RateTooFast { tau: f64, ratio: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn ensure_positive(what: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be positive and finite, got {value}")))
    }
}
