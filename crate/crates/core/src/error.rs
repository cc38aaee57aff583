use thiserror::Error;

use crate::topology::StreamState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range 0..{bound} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("softmax row {row} is fully masked")]
    Mask { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite values appeared. `sublayer` is the residual sub-layer that
    /// produced them, when known; `trace` keeps every state recorded before it.
    #[error("diverged{}: {what}", .sublayer.map(|i| format!(" at sub-layer {i}")).unwrap_or_default())]
    Diverged {
        sublayer: Option<usize>,
        what: String,
        trace: Box<Vec<StreamState>>,
    },

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn diverged(sublayer: Option<usize>, what: impl Into<String>) -> Self {
        Error::Diverged {
            sublayer,
            what: what.into(),
            trace: Box::default(),
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
