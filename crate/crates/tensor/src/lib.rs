//! Dense CPU tensors with a tape-based reverse-mode autodiff graph.
//!
//! The engine is deliberately small: contiguous row-major storage, a handful
//! of fused kernels (convolution via im2col, batch/layer normalization,
//! pooling) and GEMM from `matrixmultiply`. Every op is generic over
//! [`Scalar`] so the same model code runs in `f32` for training and in `f64`
//! for finite-difference gradient checks.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{BufferUpdate, Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerKind, OptimizerState};
pub use params::ParamStore;
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
