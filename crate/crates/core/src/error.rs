use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("primitive `{kind}` expects {expected} input(s), got {got}")]
    Arity {
        kind: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),

    #[error("loss must be a 1x1 tensor, got {0}x{1}")]
    NotScalar(usize, usize),

    #[error("loss is not connected to any tensor that requires gradients")]
    Disconnected,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("degenerate variance {0:e} in latent dimension {1}")]
    DegenerateVariance(f64, usize),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("frozen parameter `{0}` was modified during a step that fixes it")]
    FrozenModified(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
