use thiserror::Error;

pub type Result<T, E = DigError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DigError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate normalizer at token {token}: |denominator| = {value:e}")]
    DegenerateNormalizer { token: usize, value: f64 },

    #[error("{what} index {index} out of range 0..{bound}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("undefined posterior: {0}")]
    UndefinedPosterior(String),

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DigError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DigError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
