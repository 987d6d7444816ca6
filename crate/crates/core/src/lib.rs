//! Diffusion gated linear attention: tensors, reverse-mode tape, the GLA
//! cell, spatial reorientation, the DiG backbone, DDPM machinery and a
//! small training harness.

pub mod autograd;
pub mod block;
pub mod check;
pub mod diffusion;
pub mod error;
pub mod gla;
pub mod harness;
pub mod linear_attention;
pub mod model;
pub mod params;
pub mod srem;
pub mod tensor;

pub use autograd::{grad_check, GradCheckReport, Gradients, Graph, Var};
pub use diffusion::NoiseSchedule;
pub use error::{DigError, Result};
pub use gla::{GlaConfig, GlaParams, ScanMode};
pub use harness::{RunConfig, TrainConfig, TrainState};
pub use model::{flops_estimate, model_forward, FlopReport, ModelConfig, ModelParams};
pub use params::{Linear, Tree};
pub use tensor::Tensor;
