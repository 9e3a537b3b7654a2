//! Waveform frontend: synthetic sound-effect corpus, WAV I/O, and the
//! invertible lapped spectral transform producing the latent grid x0.

pub mod synth;
pub mod transform;
pub mod wav;

pub use synth::{synth_clip, ClipKind};
pub use transform::{fit_channel_scale, frontend_decode, frontend_encode, FrontendConfig};
pub use wav::{wav_read, wav_write};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 12800;

/// Mono waveform with samples nominally in [-1, 1].
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must not be empty"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Continuous latent grid x0: C channels by T frames at `latent_rate`
/// frames per second.
#[derive(Clone, Debug)]
pub struct LatentTensor {
    /// [C, T]
    pub data: Tensor<f64>,
    pub latent_rate: f64,
}

impl LatentTensor {
    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn frames(&self) -> usize {
        self.data.cols()
    }
}
