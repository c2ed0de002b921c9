use thiserror::Error;

pub type Result<T> = std::result::Result<T, CilmpError>;

#[derive(Debug, Error)]
pub enum CilmpError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("parameter `{0}` is frozen")]
    Frozen(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CilmpError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CilmpError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        CilmpError::Format {
            offset,
            msg: msg.into(),
        }
    }
}
