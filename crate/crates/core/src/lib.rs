//! Rotated binary neural networks for automatic modulation classification.

pub mod binary;
pub mod checkpoint;
mod codec;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod rng;
pub mod rotation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
