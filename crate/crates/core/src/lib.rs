//! Hierarchical residual vector-quantized autoencoder (HR-VQVAE).
//!
//! An encoder maps an image to a grid of continuous vectors; each vector is
//! quantized through a tree of codebooks where layer `i` refines the residual
//! left by layers `1..i` and the codeword picked at layer `i` selects which
//! of the `m^i` child codebooks layer `i + 1` searches. The decoder consumes
//! the sum of the selected codewords. Alongside the model live a flat VQ-VAE
//! baseline, a masked-convolution prior over code paths for sampling, the
//! benchmark routines, and the file formats used by the `hrvq` CLI.

pub mod bench;
pub mod codebook;
mod error;
pub mod exec;
pub mod io;
pub mod model;
pub mod prior;
pub mod tensor;

pub use error::{Error, Result};

/// Deterministic generator used throughout.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
