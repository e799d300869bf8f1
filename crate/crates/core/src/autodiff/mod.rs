//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.

mod adam;
mod matrix;
mod tape;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use matrix::Matrix;
pub use tape::{Mode, OpKind, ParamId, Tape, Tensor, LAYER_NORM_EPS};

pub(crate) use tape::{gelu, softmax_in_place};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: OpKind,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: OpKind },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("tensor handle does not belong to the current tape")]
    StaleTensor,
    #[error("{0}")]
    InvalidArgument(String),
}
