use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in RK4 stage {stage}")]
    NonFiniteStage { stage: usize },

    #[error("non-finite state at rollout step {step}")]
    NonFiniteState { step: usize },

    #[error(
        "nonpositive denominator {value} at trajectory index {index}; \
         the positivity offset must exceed gamma*T - min h"
    )]
    NonPositiveDenominator { index: usize, value: f64 },

    #[error("coordinate {axis} = {value} outside [{min}, {max}]")]
    OutOfRange {
        axis: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("grid axes do not match: {0}")]
    AxisMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("synthesis parameters rejected:\n{0}")]
    Validation(String),

    #[error("not a grid file (bad magic)")]
    BadMagic,

    #[error("unsupported grid file version {0}")]
    UnsupportedVersion(u32),

    #[error("grid file truncated")]
    Truncated,

    #[error("grid file checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
