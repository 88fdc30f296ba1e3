//! Query-conditioned sequence generation with multi-perspective matching,
//! a copy/coverage decoder and self-critical fine-tuning.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the root
//! aliases fix the scalar type for convenience.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rl;
pub mod scalar;
pub mod text;
pub mod training;

pub use data::{TaskMode, TrainingExample};
pub use error::{Error, Result};
pub use metrics::Metric;
pub use model::{Instance, ModelDims};
pub use scalar::Scalar;
pub use text::Vocabulary;
pub use training::TrainConfig;

pub type Tensor = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type Model = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type ParamStore = params::ParamStore<f64>;
pub type EmbeddingTable = text::EmbeddingTable<f64>;
