//! S-PRESSO: a three-stage diffusion-autoencoder audio codec.
//!
//! The pipeline is: an invertible lapped spectral frontend turns waveforms
//! into token grids; a latent encoder g_psi compresses them into a low-rate
//! continuous latent; an EDM-preconditioned diffusion decoder reconstructs
//! token grids conditioned on that latent; an offline residual quantizer
//! turns the latent into a bit-exact `.spz` stream.

pub mod bitstream;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod nn;
pub mod quantizer;
pub mod rng;
pub mod sampler;
pub mod session;
pub mod train;

pub use error::{Error, Result};
