//! A small reverse-mode autodiff engine over `ndarray`, sized for the
//! desk-scale image networks in this workspace.
//!
//! Values are `f64` throughout. A [`Graph`] is built per forward pass;
//! [`Graph::backward`] walks it in reverse, accumulating gradients into
//! leaf nodes. Parameters live outside the graph in a [`TensorMap`] and
//! are bound into each graph by name, so an optimizer can read gradients
//! back out after the pass.
//!
//! Everything is deterministic given the seed: convolutions reduce in a
//! fixed order, parallelism only splits work across disjoint output
//! slices, and all RNG flows through explicitly seeded ChaCha streams.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod optim;

pub use graph::{CustomOp, Graph, TensorId};
pub use optim::{Adam, AdamConfig, TensorMap};

use ndarray::ArrayD;

/// Errors raised by graph construction and kernels.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Checks that every element of `a` is finite.
pub fn all_finite(a: &ArrayD<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}
