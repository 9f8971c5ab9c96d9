//! Dense tensors with tape-based reverse-mode differentiation, the Adam
//! optimizer and a finite-difference gradient checker.

mod adam;
pub mod checkpoint;
mod dense;
mod gradcheck;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use dense::{argmax, Tensor};
pub use gradcheck::{finite_difference_check, finite_difference_check_params, FD_STEP};
pub use params::{Param, ParamStore};
pub use tape::{sigmoid, softplus, Gradients, SegmentReduce, Tape, Unary, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
