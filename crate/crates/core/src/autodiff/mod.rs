//! Reverse-mode differentiation over dense tensors.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, OpKind, LAYER_NORM_EPS};
pub use tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, norm, Tensor};
