//! Run configuration: one TOML file describing the whole pipeline, with
//! cross-section geometry validation at load time.

use crate::decoder::denoiser::DenoiserConfig;
use crate::decoder::edm::EdmParams;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::frontend::transform::FrontendConfig;
use crate::quantizer::QuantizerConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub frontend: FrontendSection,
    pub encoder: EncoderSection,
    pub decoder: DecoderSection,
    pub edm: EdmSection,
    pub train: TrainSection,
    pub quantizer: QuantizerSection,
    pub sampler: SamplerSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendSection {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub depth: usize,
    /// Channel grouping factor; the latent dimension is hop / c.
    pub c: usize,
    /// Temporal decimation factor; the latent frame rate is the token rate / t.
    pub t: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub model_dim: usize,
    pub heads: usize,
    pub joint_blocks: usize,
    pub audio_blocks: usize,
    pub num_classes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdmSection {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub stage1_steps: usize,
    pub stage3_steps: usize,
    pub class_dropout_p: f64,
    pub z_dropout_p: f64,
    /// Temporal crop length (token frames) used during training; 0 trains on
    /// full clips.
    pub crop_frames: usize,
    pub zq_mix_keep_z_p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSection {
    pub m: usize,
    pub k: usize,
    pub kmeans_iters: usize,
    pub beam: usize,
    pub adapters: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            frontend: FrontendSection {
                sample_rate: 12800,
                window_len: 256,
                hop: 128,
            },
            encoder: EncoderSection {
                depth: 2,
                c: 2,
                t: 4,
                heads: 4,
            },
            decoder: DecoderSection {
                model_dim: 64,
                heads: 4,
                joint_blocks: 4,
                audio_blocks: 2,
                num_classes: 5,
                lora_rank: 8,
                lora_alpha: 16.0,
            },
            edm: EdmSection {
                sigma_data: 0.5,
                p_mean: -1.2,
                p_std: 1.2,
            },
            train: TrainSection {
                lr: 5e-4,
                warmup_steps: 600,
                batch_size: 16,
                pretrain_steps: 300,
                stage1_steps: 2000,
                stage3_steps: 300,
                class_dropout_p: 0.5,
                z_dropout_p: 0.1,
                crop_frames: 50,
                zq_mix_keep_z_p: 0.1,
            },
            quantizer: QuantizerSection {
                m: 20,
                k: 1024,
                kmeans_iters: 25,
                beam: 1,
                adapters: false,
            },
            sampler: SamplerSection { steps: 64 },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let f = &self.frontend;
        if f.window_len != 2 * f.hop {
            return Err(Error::invalid("window_len must equal 2 * hop"));
        }
        if f.hop == 0 || f.sample_rate == 0 {
            return Err(Error::invalid("hop and sample_rate must be positive"));
        }
        if f.sample_rate as usize % f.hop != 0 {
            return Err(Error::invalid("hop must divide sample_rate"));
        }
        if self.encoder.c == 0 || f.hop % self.encoder.c != 0 {
            return Err(Error::invalid("encoder c must divide the channel count"));
        }
        if self.encoder.t == 0 {
            return Err(Error::invalid("encoder t must be positive"));
        }
        if !self.quantizer.k.is_power_of_two() || self.quantizer.k < 2 {
            return Err(Error::invalid("quantizer k must be a power of two >= 2"));
        }
        if self.quantizer.m == 0 || self.quantizer.beam == 0 {
            return Err(Error::invalid("quantizer m and beam must be positive"));
        }
        if self.sampler.steps == 0 {
            return Err(Error::invalid("sampler steps must be positive"));
        }
        self.encoder_config().validate(self.channels())?;
        self.edm_params().validate()?;
        self.train_config(0).validate()?;
        Ok(())
    }

    /// Spectral channel count (= hop length).
    pub fn channels(&self) -> usize {
        self.frontend.hop
    }

    /// Latent dimension after channel grouping.
    pub fn latent_dim(&self) -> usize {
        self.channels() / self.encoder.c
    }

    /// Token rate of the frontend grid, in Hz.
    pub fn token_rate(&self) -> f64 {
        self.frontend.sample_rate as f64 / self.frontend.hop as f64
    }

    /// Latent frame rate after temporal decimation, in Hz.
    pub fn frame_rate(&self) -> f64 {
        self.token_rate() / self.encoder.t as f64
    }

    pub fn frontend_config(&self) -> FrontendConfig {
        FrontendConfig {
            window_len: self.frontend.window_len,
            hop: self.frontend.hop,
            channel_scale: vec![1.0; self.frontend.hop],
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            depth: self.encoder.depth,
            c: self.encoder.c,
            t: self.encoder.t,
            model_dim: self.channels(),
            heads: self.encoder.heads,
        }
    }

    pub fn edm_params(&self) -> EdmParams {
        EdmParams {
            sigma_data: self.edm.sigma_data,
            p_mean: self.edm.p_mean,
            p_std: self.edm.p_std,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.channels(),
            cond_dim: self.latent_dim(),
            model_dim: self.decoder.model_dim,
            heads: self.decoder.heads,
            joint_blocks: self.decoder.joint_blocks,
            audio_blocks: self.decoder.audio_blocks,
            num_classes: self.decoder.num_classes,
            edm: self.edm_params(),
        }
    }

    pub fn train_config(&self, steps: usize) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            warmup_steps: self.train.warmup_steps,
            batch_size: self.train.batch_size,
            steps,
            seed: self.seed,
            class_dropout_p: self.train.class_dropout_p,
            z_dropout_p: self.train.z_dropout_p,
            crop_frames: self.train.crop_frames,
            zq_mix_keep_z_p: self.train.zq_mix_keep_z_p,
            edm: self.edm_params(),
        }
    }

    pub fn quantizer_config(&self) -> QuantizerConfig {
        QuantizerConfig {
            m: self.quantizer.m,
            k: self.quantizer.k,
            kmeans_iters: self.quantizer.kmeans_iters,
            adapters: self.quantizer.adapters,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("serialize config: {e}")))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Format(format!("parse config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}
