use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on a tensor that does not depend on any trainable leaf")]
    Detached,
    #[error("{op}: value {value} outside the allowed range {range}")]
    Domain { op: &'static str, value: f64, range: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TensorError {
    pub fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}
