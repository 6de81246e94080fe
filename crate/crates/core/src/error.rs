use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("vocabulary error: token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("truncation error: sequence of length {len} exceeds max_len {max_len}")]
    Truncation { len: usize, max_len: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("validity error: {0}")]
    Validity(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("non-finite gradient in parameter `{name}` (first bad index {index})")]
    NonFiniteGradient { name: String, index: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
