//! Causal-intervention multi-label image classification at desk scale.

pub mod backbone;
pub mod causal;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod synthbench;
pub mod train;

pub use error::{Error, Result};
