//! A compact reverse-mode automatic differentiation engine over `f64`
//! ndarray tensors.
//!
//! Ops record themselves on a [`Graph`]; [`Graph::grad`] runs the backward
//! pass. Every backward rule is expressed with graph ops, so
//! [`Graph::grad_with_graph`] yields gradients that can be differentiated
//! again (used for gradient penalties).

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod ops;
pub mod optim;
mod params;

pub use graph::{Backward, Graph, Tensor, Var};
pub use kernels::Exec;
pub use ops::{bilinear_matrix, reduce_to, sigmoid};
pub use optim::{Adam, Sgd};
pub use params::{Bound, ParamSet};

pub use ndarray;
