pub mod ablation;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
