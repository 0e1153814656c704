//! Residual attention network for two-class chest X-ray classification.
//!
//! The crate contains a small CPU tensor engine with reverse-mode
//! differentiation, the residual and attention building blocks, the full
//! network, Adam training, dataset handling and evaluation metrics.

pub mod blocks;
pub mod data;
pub mod engine;
mod error;
pub mod metrics;
pub mod model;
pub mod optim;
mod rng;

pub use error::{Error, Result};
pub use model::{build_model, load_model, save_model, ModelConfig, ModelGraph};
pub use optim::TrainConfig;
