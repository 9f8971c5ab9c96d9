//! Differentiable architecture search for graph neural networks.
//!
//! A supernet of graph blocks holds every candidate operator; a controller
//! picks one operator per sub-block (single path) and Gumbel-sigmoid gates
//! decide which shortcut connections link block inputs to later block
//! outputs. Weights and architecture parameters are trained alternately on
//! the train and validation splits.
//!
//! The autodiff core in [`tensor`] is generic over [`Scalar`]; the search
//! stack runs in `f64` through the aliases below.

pub mod cli;
pub mod controller;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod micro;
pub mod router;
pub mod scalar;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Element type of the search stack.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tensor::Tape<Real>;
pub type ParamStore = tensor::ParamStore<Real>;
pub type Gradients = tensor::Gradients<Real>;
pub type Adam = tensor::Adam<Real>;
pub use tensor::Var;
