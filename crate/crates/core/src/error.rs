use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (last attempted jitter {jitter:e})")]
    Singular { jitter: f64 },

    #[error("degenerate correlation: minimum eigenvalue of B is {min_eigenvalue:e}")]
    DegenerateCorrelation { min_eigenvalue: f64 },

    #[error("gradient requested of a non-scalar output with shape {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("operation `{op}` has no second-derivative rule")]
    UnsupportedOp { op: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training instability: {0}")]
    Instability(String),

    #[error("idx parse error at byte offset {offset}: {message}")]
    Idx { offset: usize, message: String },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
