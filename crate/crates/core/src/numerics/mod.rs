//! Dense tensors, convolution kernels and reverse-mode differentiation.

pub mod conv;
pub mod io;
pub mod ops;
mod store;
pub mod tape;
mod tensor;

pub use conv::{conv2d, conv2d_biased, deconv2d, deconv2d_biased};
pub use ops::{add, concat_channels, l1_loss, layer_norm, leaky_relu, linear, softmax};
pub use store::{Bound, ParamStore};
pub use tape::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Activation slope used inside residual blocks.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Variance floor for layer normalisation.
pub const LN_EPS: f64 = 1e-5;
