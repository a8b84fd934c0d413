use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed instance file header (missing or unparsable keyword).
    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },

    /// Instance file declares an edge weight type other than EUC_2D.
    #[error("line {line}: unsupported edge weight type `{found}` (only EUC_2D is supported)")]
    UnsupportedWeightType { line: usize, found: String },

    /// Number of coordinate lines does not match the declared dimension.
    #[error("line {line}: coordinate count mismatch: declared {declared}, found {found}")]
    CoordCountMismatch {
        line: usize,
        declared: usize,
        found: usize,
    },

    /// A coordinate failed to parse or is not finite.
    #[error("line {line}: bad coordinate: {reason}")]
    BadCoordinate { line: usize, reason: String },

    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Node index outside `0..n`.
    #[error("node index {index} out of range for instance with {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },

    /// Inconsistent instance sets across pipeline inputs.
    #[error("data mismatch: {0}")]
    DataMismatch(String),

    /// Malformed record in a CSV input.
    #[error("{path}: row {row}: {reason}")]
    CsvData {
        path: String,
        row: usize,
        reason: String,
    },

    /// Malformed key-value config file.
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    /// Malformed checkpoint, tensor, or model file.
    #[error("{path}: bad file format: {reason}")]
    BadFileFormat { path: String, reason: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        Error::DataMismatch(msg.into())
    }
}
