//! Minimal dense tensors and reverse-mode automatic differentiation.
//!
//! The op set is what a small pre-norm transformer needs: matmul, embedding
//! lookup, RMSNorm, SwiGLU, rotary embeddings, fused multi-head attention,
//! row softmax and weighted cross-entropy. Everything runs single-threaded
//! with a fixed reduction order, so results are bit-reproducible.

mod error;
pub mod functional;
mod graph;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
