use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{op}: zero-norm vector")]
    ZeroVector { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(
        "identity sampling stalled after {draws} consecutive rejections with {accepted} accepted; \
         lower the count or raise the similarity threshold"
    )]
    SamplingStall { accepted: usize, draws: usize },

    #[error("perturbation slot {slot} exhausted {tries} retries")]
    RetryExhausted { slot: usize, tries: usize },

    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },

    #[error("attribute search produced a non-finite update at iteration {iteration}")]
    NonFiniteUpdate { iteration: usize },

    #[error("identity {identity}: insufficient supply ({detail})")]
    InsufficientSupply { identity: u64, detail: String },

    #[error("identity {identity}: mean feature has zero norm")]
    DegenerateIdentity { identity: u64 },

    #[error("fold {fold} contains a single class")]
    SingleClassFold { fold: usize },

    #[error("missing group: {0}")]
    MissingGroup(String),

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable kebab-case tag for the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::ZeroVector { .. } => "zero-vector",
            Error::NotScalar { .. } => "not-scalar",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Empty(_) => "empty",
            Error::SamplingStall { .. } => "sampling-stall",
            Error::RetryExhausted { .. } => "retry-exhausted",
            Error::Divergence { .. } => "divergence",
            Error::NonFiniteUpdate { .. } => "non-finite-update",
            Error::InsufficientSupply { .. } => "insufficient-supply",
            Error::DegenerateIdentity { .. } => "degenerate-identity",
            Error::SingleClassFold { .. } => "single-class-fold",
            Error::MissingGroup(_) => "missing-group",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }

    /// Configuration and input-validation failures, as opposed to failures
    /// while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Format { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
