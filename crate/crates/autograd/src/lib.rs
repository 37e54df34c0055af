//! Tape-based reverse-mode automatic differentiation over `f64` ndarrays,
//! with the layers, optimizers, and persistence needed to train small
//! convolutional networks deterministically on a CPU.
//!
//! Design points:
//! - gradients are tape nodes, so penalties built from gradients can be
//!   differentiated again (second-order support without extra machinery);
//! - parameter leaves deduplicate by storage identity, so a module used in
//!   several places of one graph accumulates a single gradient;
//! - everything is `f64` and single-threaded, making runs reproducible to the
//!   bit for a fixed seed.

pub mod kernels;
pub mod nn;
pub mod tape;

pub use kernels::ConvSpec;
pub use tape::{Grads, NodeId, Shared, Tape};
