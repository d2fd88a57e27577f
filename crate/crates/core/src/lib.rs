//! Denoising convolutional autoencoder for printed-circuit-board inspection.
//!
//! The crate trains an encoder/decoder network to map defective board images
//! onto their intact templates, then flags boards whose input differs
//! structurally from the network's reconstruction.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod localize;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
