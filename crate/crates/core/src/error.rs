use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum VglError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("environment definition error: {0}")]
    EnvDefinition(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("greedy solver failed to certify a maximum: {0}")]
    SolverFailure(String),

    #[error("policy derivative undefined: {0}")]
    DerivativeUndefined(String),

    #[error("target value-gradient undefined for t <= {step}: {reason}")]
    TargetUndefined { step: usize, reason: String },

    #[error("episode did not terminate within {max_horizon} steps")]
    EpisodicViolation { max_horizon: usize },

    #[error("lambda must lie in [0, 1], got {0}")]
    InvalidLambda(f64),

    #[error("pgl omega singular at step {step} (condition number {condition:e})")]
    OmegaSingular { step: usize, condition: f64 },

    #[error("pgl omega requires unsaturated actions, step {step} is saturated")]
    OmegaSaturated { step: usize },

    #[error("bptt requires unbound actions, step {step} is saturated")]
    UnsupportedSaturation { step: usize },

    #[error("policy gradient undefined at step {step}: {reason}")]
    GradientUndefined { step: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed log {path}: {reason}")]
    LogFormat { path: String, reason: String },

    #[error("weights file error: {0}")]
    WeightsFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VglError>;
