use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty channel basis: l_max {l_max} < |m| = {m}")]
    EmptyBasis { l_max: u32, m: i32 },
    #[error("short-range tuning failed after {iterations} iterations; a_sc sweep {sweep:?}")]
    TuningFailed { iterations: usize, sweep: Vec<(f64, f64)> },
    #[error("propagation failed at r = {r}: {reason}")]
    Propagation { r: f64, reason: String },
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),
    #[error("characteristic root left the real axis (l = {l}, delta = {delta})")]
    ComplexRoot { l: u32, delta: f64 },
    #[error("continued fraction did not converge by depth {0}")]
    Divergence(usize),
    #[error("threshold regime not reached: {0}")]
    ThresholdNotReached(String),
    #[error("matching failed: {0}")]
    Matching(String),
    #[error("r0 selection failed: {0}")]
    R0Selection(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
