//! Convolutional classifier engine: layer kernels, the fixed topology, Adam,
//! and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::Mode;
pub use model::{ForwardCache, Gradients, ModelConfig, ModelParams, Pass};
pub use tensor::{Scalar, Tensor};
