//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward pass. Heavy operations (attention,
//! deformable sampling, Chamfer matching) are fused nodes with hand-written
//! backward rules; see [`Graph::custom`].

pub mod gemm;
mod graph;
mod ops;
mod params;
mod tensor;

pub use graph::{GradSink, Gradients, Graph, Var};
pub use ops::AttnMask;
pub use params::{Init, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
