//! Deep episodic memory for short video episodes.
//!
//! A composite network encodes the first `k` frames of an `n`-frame episode into a latent
//! vector, reconstructs those frames and predicts the remaining `n - k` from that vector alone.
//! Latent vectors are stored in an [`memory::EpisodicMemory`] and matched by cosine similarity.
//!
//! - [`substrate`]: tensors, reverse-mode differentiation, ADAM.
//! - [`model`]: the encoder / dual-decoder network, training and checkpoints.
//! - [`losses`]: squared-error and gradient-difference losses, PSNR.
//! - [`memory`]: latent storage, retrieval and class-mean PCA.
//! - [`synthetic`]: a deterministic moving-shapes action corpus.
//! - [`eval`]: similarity matrices, PSNR curves and the retrieval benchmark.

mod binio;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod memory;
pub mod model;
pub mod substrate;
pub mod synthetic;

pub use error::{Error, Result};
