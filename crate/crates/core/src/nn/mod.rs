//! Dense tensors, reverse-mode autodiff, the layer primitives used by the
//! autoencoder, Adam, and the MSE/SSIM losses.

mod adam;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod ssim;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{mse, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use ssim::{ssim, SsimParams};
pub use tensor::Tensor;
