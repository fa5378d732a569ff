pub mod dataset;
pub mod error;
pub mod export;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numgrad;
pub mod passing;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// 64-bit instantiations used by tests and the command line.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model64 = model::Model<f64>;
pub type ModelParams64 = model::ModelParams<tensor::Tensor<f64>>;
pub type PreparedClip64 = model::PreparedClip<f64>;
pub type Graph64 = graph::SpatioTemporalGraph<f64>;
