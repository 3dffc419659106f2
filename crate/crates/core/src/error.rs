use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("outside domain: {0}")]
    Domain(String),

    #[error("non-finite objective or gradient at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("dataset `{id}`: {source}")]
    Dataset { id: String, source: Box<Error> },

    #[error("tabular oracle exhausted: every candidate has been observed")]
    Exhausted,

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NumericalFailure(_) => "numerical_failure",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Domain(_) => "domain",
            Error::NonFinite { .. } => "non_finite",
            Error::Dataset { source, .. } => source.kind(),
            Error::Exhausted => "exhausted",
            Error::Schema { .. } => "schema",
            Error::Version { .. } => "version",
            Error::Malformed(_) => "malformed",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    /// Whether the failure comes from the caller's inputs rather than from the numerics.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::NumericalFailure(_) | Error::NonFinite { .. } => false,
            Error::Dataset { source, .. } => source.is_user_error(),
            _ => true,
        }
    }

    pub(crate) fn in_dataset(self, id: &str) -> Error {
        Error::Dataset { id: id.to_string(), source: Box::new(self) }
    }
}
