use thiserror::Error;

/// Errors raised by the numerical core and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is singular to working precision (pivot {pivot:e}, scale {scale:e})")]
    SingularMatrix { pivot: f64, scale: f64 },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("problem too large for dense evaluation: {size} > {cap}")]
    TooLarge { size: usize, cap: usize },

    #[error("unsupported layer {index}: {reason}")]
    UnsupportedLayer { index: usize, reason: String },

    #[error("Kronecker factor {factor} of block {block} is singular; add damping")]
    SingularFactor { block: usize, factor: &'static str },

    #[error("exact Fisher is singular (smallest eigenvalue {min_eigenvalue:e})")]
    SingularFisher { min_eigenvalue: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by degenerate numerical inputs rather than bad
    /// configuration.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::SingularMatrix { .. } | Error::SingularFactor { .. } | Error::SingularFisher { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch(msg.into()))
}
