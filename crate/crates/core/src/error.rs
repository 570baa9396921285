use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Extents disagree; `axis` names the offending axis or argument.
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    /// A value lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation contract (non-scalar loss, missing grad, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Batch statistics are undefined for a single element per channel.
    #[error("degenerate variance: batch norm in train mode needs at least two elements per channel, got {0}")]
    DegenerateVariance(usize),

    /// Empty pools, malformed manifests, and similar data problems.
    #[error("data error: {0}")]
    Data(String),

    /// An oracle found nothing to measure.
    #[error("undecidable: {0}")]
    Undecidable(String),

    /// A loss or activation went NaN/Inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed or mismatched checkpoint / file contents.
    #[error("format error: {0}")]
    Format(String),

    /// A tensor in a checkpoint does not match the expected architecture.
    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(axis: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Dimension {
        axis: axis.into(),
        detail: detail.into(),
    }
}
