use thiserror::Error;

use crate::lowrank::LowRankState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what} count {value}: {reason}")]
    InvalidCount {
        what: &'static str,
        value: usize,
        reason: &'static str,
    },

    #[error("degenerate domain [{x_min}, {x_max}]")]
    DegenerateDomain { x_min: f64, x_max: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// The assembled Kronecker system has a zero (or non-finite) pivot.
    #[error("singular {context} system (condition estimate {condition:.3e})")]
    SingularSystem { context: &'static str, condition: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical abort at step {step} (t = {time}): {reason}")]
    NumericalAbort {
        step: usize,
        time: f64,
        reason: String,
        /// Last finite state before the abort, for post-mortem dumps.
        last_state: Option<Box<LowRankState>>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error record and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidCount { .. }
            | Error::DegenerateDomain { .. }
            | Error::RankOutOfRange { .. }
            | Error::InvalidParameter(_)
            | Error::UnknownName { .. } => "invalid-argument",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::NonFinite(_) | Error::SingularSystem { .. } | Error::NumericalAbort { .. } => {
                "numerical"
            }
            Error::Config(_) => "config",
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => "io",
        }
    }
}
