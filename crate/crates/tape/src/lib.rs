//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The engine is deliberately small: every value is a row-major [`Matrix`],
//! sequences are stored as contiguous row blocks, and the handful of fused
//! operations sequence models need (causal attention, 1-D convolution
//! unfolding, layer normalization, cross-entropy) carry hand-written adjoints.

mod graph;
mod matrix;
mod optim;

pub use graph::{Backward, Conv1dGeom, Gradients, Graph, ParamId, ParamStore, Var};
pub use matrix::{gemm_into, matmul, Matrix};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
