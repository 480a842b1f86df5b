//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass; every op appends a node holding its
//! value and whatever it needs for the reverse sweep. [`Graph::backward`]
//! walks the nodes in reverse and returns [`Gradients`] for all nodes that
//! depend on a trainable leaf. Leaves added through [`Graph::constant`]
//! never receive gradients.

pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use graph::{
    sigmoid, Activation, BatchStats, Gradients, Graph, GruVars, NormMode, Padding, Var,
};
pub use tensor::Tensor;
