//! Minimal tensor engine: dense arrays, im2col convolutions, reverse-mode
//! autodiff and AdamW. Generic over `f32` (training) and `f64` (gradient checks).

mod fpmode;
mod graph;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use fpmode::FlushDenormals;
pub use graph::{Gradients, Graph, Var};
pub use kernels::ConvGeom;
pub use layers::{Conv1d, ConvSpec, ConvTranspose1d, Ctx, Linear};
pub use optim::AdamW;
pub use params::{Init, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod gradcheck;
