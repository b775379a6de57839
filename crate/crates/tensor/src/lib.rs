//! Minimal CPU tensor library with tape-based reverse-mode autodiff.
//!
//! Feature maps are 5-D `(batch, channels, depth, height, width)` buffers;
//! planar networks simply use `depth = 1`.

mod error;
mod graph;
mod kernels;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BatchStats, Gradients, Graph, NormMode, Var};
pub use kernels::WindowSpec;
pub use params::{Param, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
