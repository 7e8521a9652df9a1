//! Dense tensors, reverse-mode differentiation, the optimizer and its schedules.

mod adam;
mod float;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use float::{DType, Real};
pub use params::{filled, normal, xavier, ParamId, ParamStore};
pub use schedule::{anneal_tau, noam_lr, TauSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use float::lit;
pub(crate) use tape::argmax;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape; run a new forward pass first")]
    TapeConsumed,
    #[error("divergence: {0}")]
    Divergence(String),
}
