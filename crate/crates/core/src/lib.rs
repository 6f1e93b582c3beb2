//! Infrared/visible image fusion trained under structured input interventions.
//!
//! A siamese U-Net encodes both modalities with shared weights; at every scale a
//! feature integrator combines pooled bidirectional cross-attention with local
//! features through a learned invariance gate. Training compares the baseline
//! fusion against fusions of complementary-masked, identically-masked and
//! single-modality inputs.

pub mod ate;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interventions;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
