use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped by the subsystem that raises
/// them so the CLI can map them onto distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested tensor operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// An argument is outside its documented domain.
    #[error("invalid argument for {what}: {details}")]
    InvalidArgument { what: &'static str, details: String },

    /// `backward` was invoked on a tensor that is not a single scalar.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// An attention row had every position masked out, leaving softmax
    /// undefined.
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    /// A non-finite value (NaN or infinity) surfaced where finite arithmetic
    /// is required, e.g. in the loss during gradient checking or training.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A model or run configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A data file (corpus, vocabulary, embeddings, predictions) is
    /// malformed. Carries the path and 1-based line number when known.
    #[error("malformed data in {path}:{line}: {details}")]
    MalformedData {
        path: PathBuf,
        line: usize,
        details: String,
    },

    /// A checkpoint file could not be decoded or fails its integrity checks.
    #[error("invalid checkpoint {path}: {details}")]
    Checkpoint { path: PathBuf, details: String },

    /// Metric inputs are unusable (empty, mismatched, or out of range).
    #[error("invalid metric input: {0}")]
    Metrics(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn invalid(what: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            details: details.into(),
        }
    }

    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
