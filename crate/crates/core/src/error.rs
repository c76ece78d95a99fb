use thiserror::Error;

/// Errors raised anywhere in the transport pipeline.
#[derive(Debug, Error)]
pub enum EptError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("backward called before forward: node {0} has no value")]
    BackwardBeforeForward(usize),

    #[error("missing binding for input node {0}")]
    MissingBinding(usize),

    #[error("root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} name `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("non-finite velocity at particle {index}")]
    NonFiniteVelocity { index: usize },

    #[error("fit diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("size cap exceeded: {0}")]
    SizeCap(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EptError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> EptError {
    EptError::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> EptError {
    EptError::InvalidArgument(msg.into())
}
