//! Dual-branch monocular depth estimation: a trainable convolutional
//! predictor whose multi-scale features exchange information with a frozen
//! transformer enhancer through pattern partitioning, masked co-processing
//! and injection.

pub mod decoder;
pub mod encoder;
pub mod enhancer;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pei;
pub mod scenegen;
pub mod substrate;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
