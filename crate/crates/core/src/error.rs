use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// data/preprocessing problems are recoverable input errors, numerical
/// failures indicate a diverged run.
#[derive(Error, Debug)]
pub enum Error {
    #[error("preprocessing error: {0}")]
    Preprocessing(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error at line {line}: {msg}")]
    DataLine { line: usize, msg: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// True for errors that indicate a diverged or ill-posed computation
    /// rather than bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}
