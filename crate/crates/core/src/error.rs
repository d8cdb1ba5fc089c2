use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("network solver diverged after {iterations} iterations (mismatch {mismatch:.3e} pu)")]
    SolverDivergence { iterations: usize, mismatch: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed CSV at row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("sweep cell {scenario} at {fraction}: {source}")]
    Cell {
        scenario: String,
        fraction: f64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }
}
