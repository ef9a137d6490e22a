//! DiffusionBlocks: convert residual token networks into independently
//! trainable denoising blocks.
//!
//! The pipeline mirrors the three-step conversion recipe:
//!
//! 1. partition a stack of `L` token-to-token layers into `B` contiguous
//!    blocks ([`blocks::convert`]),
//! 2. assign each block an equi-probability slice of the log-normal noise
//!    distribution ([`schedule::partition_boundaries`]),
//! 3. condition every layer on the noise level (AdaLN, [`nn`]) and train each
//!    block as an independent denoiser over its slice ([`train`]).
//!
//! Inference chains the blocks from `sigma_max` down to `sigma_min` with
//! Euler steps ([`blocks::sample`]). A discrete masked-diffusion variant
//! partitions the masking schedule instead ([`masked`]). Everything runs on a
//! small f64 tensor engine with reverse-mode autodiff ([`tensor`]) so that
//! gradient checks and the accounting invariants are exact.

pub mod blocks;
pub mod cli;
pub mod masked;
pub mod nn;
pub mod parallel;
pub mod schedule;
pub mod tasks;
pub mod tensor;
pub mod train;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
