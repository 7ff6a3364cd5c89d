use crate::editor::LossRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("prefix cache invalid: {0}")]
    CacheInvalid(String),

    #[error("non-finite value{}: {what}", layer.map(|l| format!(" in layer {l}")).unwrap_or_default())]
    Numeric { layer: Option<usize>, what: String },

    #[error("non-finite loss for perturbation direction {index}")]
    NonFiniteLoss { index: usize },

    #[error("covariance is singular: {0}")]
    Singular(String),

    #[error("degenerate key: denominator {denominator:e} below threshold {threshold:e}")]
    DegenerateKey { denominator: f64, threshold: f64 },

    #[error("value optimization diverged at step {step}")]
    Divergence { step: usize, trace: Vec<LossRecord> },

    #[error("training failed: loss went from {initial:.4} to {last:.4}")]
    TrainingFailure { initial: f64, last: f64 },

    #[error("instrumentation violation: {0}")]
    Instrumentation(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, fields: Vec<String>, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
