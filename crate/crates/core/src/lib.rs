//! Flow-guided sparse window attention for video deblurring.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] dense `f64` tensors, convolution kernels and a reverse-mode tape.
//! * [`flow`] motion offset fields, estimators and pyramid rescaling.
//! * [`attention`] flow-guided key sets, sparse attention, a masked dense oracle and cost formulas.
//! * [`blocks`] residual blocks, patch merging/expanding, feature warping and the recurrent attention block.
//! * [`model`] the U-shaped restoration network, configuration and checkpoints.
//! * [`evaluation`] synthetic blurred video, PSNR/SSIM, Adam and the toy trainer.

pub mod attention;
pub mod blocks;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod model;
pub mod numerics;

pub use error::{FgstError, Result};
pub use numerics::{Graph, Tensor, Var};
