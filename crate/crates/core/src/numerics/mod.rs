//! Dense tensors and reverse-mode differentiation.

pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use kernels::{gelu, layer_norm, matmul, silu, softmax};
pub use params::{ParamId, ParamStore};
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Epsilon used by every layer normalization in the score network.
pub const LAYER_NORM_EPS: f64 = 1e-5;
