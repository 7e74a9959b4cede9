//! Volumetric segmentation toolkit with adversarial feature augmentation.

pub mod afa;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod rng;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
