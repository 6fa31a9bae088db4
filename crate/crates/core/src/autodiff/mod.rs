//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records primitive operations as they are evaluated. Heavy
//! kernels (rasterization, SSIM, convolution, plane sampling, Moran's I) plug
//! in through [`CustomBackward`] so each keeps its adjoint next to its forward
//! code.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_five_point, gradient_report, relative_error, GradientReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, softplus, CustomBackward, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;


#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("usage error: {0}")]
    Usage(String),
}
