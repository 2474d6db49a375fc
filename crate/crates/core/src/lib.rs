//! Context-dependent definition and usage generation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod decoder;
pub mod encoder;
mod init;
pub mod metrics;
pub mod model;
pub mod error;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
