//! Frequency-aware generative adversarial attack pipeline.
//!
//! Trains an image-to-image perturbation generator against a frozen
//! surrogate classifier using frequency-band data randomization and
//! band-contrastive feature losses, then evaluates how well the resulting
//! adversarial examples transfer to unseen victim models.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod ops;
pub mod spectral;
pub mod surrogate;
pub mod training;

pub use error::{Error, Result};
