//! Learned components for autoregressive multi-agent motion generation: a
//! transformer motion VAE, a latent diffusion denoiser conditioned on
//! partners and text, the training loops, the multi-agent session engine and
//! a contrastive evaluator.

pub mod checkpoint;
pub mod condition;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod train;
pub mod vae;

pub use error::{ModelError, Result};
pub use candle_core::DType;
