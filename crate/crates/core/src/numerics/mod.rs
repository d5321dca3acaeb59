//! Minimal differentiable tensor core.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
mod rng;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Want};
pub use graph::{Gradients, Graph, Mode, Var};
pub use kernels::ConvGeometry;
pub use params::{ParamStore, Parameter, RunningStats, StatStore};
pub use rng::RngStream;
pub use scalar::{gemm, Scalar, Trans};
pub use tensor::Tensor;
