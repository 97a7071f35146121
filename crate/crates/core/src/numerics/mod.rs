//! Differentiable tensor core.

mod gradcheck;
pub mod nn;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_inputs, gradcheck_params, relative_error, ParamCheck, GRADCHECK_STEP};
pub use real::Real;
pub use tape::{BnStats, Mode, Tape, Var, BN_MOMENTUM, NORM_EPS};
pub use tensor::{broadcast_shapes, numel, strides, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("zero extent in shape {0:?}")]
    EmptyExtent(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("batch norm in train mode needs more than one value per channel (got {0})")]
    DegenerateBatch(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
