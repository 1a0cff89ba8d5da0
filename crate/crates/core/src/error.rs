use thiserror::Error;

#[derive(Debug, Error)]
pub enum VdtError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{dim} = {value} is not divisible by {divisor}")]
    Indivisible {
        dim: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("embedding width {0} must be even")]
    OddWidth(usize),

    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),

    #[error("mask selects no frames")]
    EmptyMask,

    #[error("conditioning mismatch: {0}")]
    Conditioning(String),

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("parameter `{0}` has no group tag")]
    UntaggedParam(String),

    #[error("infeasible geometry: {0}")]
    Geometry(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("non-finite loss {loss} at step {step} ({stats})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        stats: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VdtError>;
