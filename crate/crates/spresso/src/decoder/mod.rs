//! Conditional diffusion decoder: EDM preconditioning wrapped around a
//! transformer denoiser with a downsampled-audio conditioning modality and
//! low-rank adapters on the base weights.

pub mod denoiser;
pub mod edm;

pub use denoiser::{Conditioning, Denoiser, DenoiserConfig};
pub use edm::{loss_weight, precondition_coeffs, EdmParams};
