//! Motion-guided avatar reenactment at desk scale: a procedural avatar
//! generator with exact ground truth, a two-branch conditional diffusion
//! backbone with motion-aligned appearance conditioning, hand-memory
//! attention, temporal attention, two-stage training with few-shot
//! fine-tuning, and a metric suite.
//!
//! All numeric kernels are generic over [`scalar::Scalar`]; `f32` is the
//! training type, `f64` backs gradient verification. Concrete aliases live
//! at the crate root.

pub mod error;
pub mod graph;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
