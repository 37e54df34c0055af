//! Joint re-identification and image-generation training lab.
//!
//! The crate wires a shared appearance encoder into both a retrieval model
//! and a generator: images are decomposed into an appearance code and a
//! structure code, recombined across identities by an adaptive-normalization
//! decoder, scored by a multi-scale patch discriminator, and the synthesized
//! images are fed back through the encoder under a teacher's soft labels.
//!
//! Everything runs on the f64 tape in the `autograd` crate, single threaded,
//! so training and evaluation are bit-reproducible for a given seed.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nets;
pub mod objectives;
pub mod trainer;

/// CLI entry point; the binary delegates here.
pub fn run() -> error::Result<()> {
    cli::main()
}
