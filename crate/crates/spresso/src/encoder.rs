//! Latent encoder g_psi: transformer blocks over the full-rate latent grid,
//! a learned linear frequency reduction C -> C/c, and temporal average
//! pooling by stride t.

use crate::error::{Error, Result};
use crate::nn::block::BlockCache;
use crate::nn::param::{Param, ParamGroup, Parameterized};
use crate::nn::pool::{pool_rows, pool_rows_backward};
use crate::nn::rope::RopeTable;
use crate::nn::tensor::{sc, Scalar, Tensor};
use crate::nn::{Dense, TransformerBlock};
use rand::Rng;

pub const ROPE_BASE: f64 = 10000.0;

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub depth: usize,
    /// Frequency compression factor; must divide C.
    pub c: usize,
    /// Temporal pooling stride.
    pub t: usize,
    pub model_dim: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.c == 0 || channels % self.c != 0 {
            return Err(Error::invalid(format!(
                "frequency factor c = {} must divide C = {channels}",
                self.c
            )));
        }
        if self.t == 0 {
            return Err(Error::invalid("temporal stride t must be >= 1"));
        }
        if self.model_dim != channels {
            return Err(Error::invalid(format!(
                "encoder model_dim {} must equal the latent channel count {channels}",
                self.model_dim
            )));
        }
        Ok(())
    }

    pub fn out_dim(&self, channels: usize) -> usize {
        channels / self.c
    }
}

/// Compressed latent z: frames as rows, shape [T', D] (the logical grid is
/// D x T'; frames are stored as rows for direct per-frame access).
#[derive(Clone, Debug)]
pub struct CompressedLatent<T> {
    pub data: Tensor<T>,
    pub frame_rate: f64,
}

impl<T: Scalar> CompressedLatent<T> {
    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn cast<U: Scalar>(&self) -> CompressedLatent<U> {
        CompressedLatent {
            data: self.data.cast(),
            frame_rate: self.frame_rate,
        }
    }
}

/// RoPE positions of the conditioning tokens: the central frame of each
/// pooled window, i*t + floor((t-1)/2).
pub fn decimated_positions(frames: usize, t: usize) -> Vec<usize> {
    (0..frames / t).map(|i| i * t + (t - 1) / 2).collect()
}

/// Block counts per conditioning frame rate, nearest listed rate for custom
/// values: 6 at 25 Hz, 10 at 100/9 Hz, 12 at 5 Hz and 1 Hz.
pub fn depth_for_framerate(frame_rate: f64) -> usize {
    const TABLE: [(f64, usize); 4] = [(25.0, 6), (100.0 / 9.0, 10), (5.0, 12), (1.0, 12)];
    TABLE
        .iter()
        .min_by(|a, b| {
            (a.0 - frame_rate)
                .abs()
                .partial_cmp(&(b.0 - frame_rate).abs())
                .unwrap()
        })
        .unwrap()
        .1
}

#[derive(Clone, Debug)]
pub struct LatentEncoder<T> {
    pub cfg: EncoderConfig,
    pub blocks: Vec<TransformerBlock<T>>,
    /// [D, C] frequency reduction applied per frame after the blocks.
    pub linear: Dense<T>,
}

pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    linear: crate::nn::dense::DenseCache<T>,
    in_frames: usize,
}

impl<T: Scalar> LatentEncoder<T> {
    pub fn new(cfg: EncoderConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(channels)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(TransformerBlock::new(
                cfg.model_dim,
                cfg.heads,
                false,
                ParamGroup::Encoder,
                rng,
            )?);
        }
        // Spectral coefficients alternate sign from frame to frame, so their
        // plain temporal average pools toward zero; what survives pooling is
        // the band magnitude. Seed the first block's MLP near x -> x + e|x|
        // per channel (GELU(gx) + GELU(-gx) ~ g|x|) so the pooled latent
        // carries band energies from the first step instead of waiting for
        // training to discover rectification.
        if let Some(b0) = blocks.first_mut() {
            let dm = cfg.model_dim;
            for i in 0..dm {
                b0.fc1.w.value.set2(i, i, sc::<T>(2.0));
                b0.fc1.w.value.set2(dm + i, i, sc::<T>(-2.0));
                b0.fc2.w.value.set2(i, i, sc::<T>(0.25));
                b0.fc2.w.value.set2(i, dm + i, sc::<T>(0.25));
            }
        }
        // Seed the frequency reduction near the channel-group average so z
        // starts aligned with the token grid's band layout.
        let mut linear = Dense::new(cfg.out_dim(channels), channels, true, ParamGroup::Encoder, rng);
        for d in 0..cfg.out_dim(channels) {
            for k in 0..cfg.c {
                let j = d * cfg.c + k;
                let v = linear.w.value.at2(d, j);
                linear.w.value.set2(d, j, v + sc::<T>(1.0 / cfg.c as f64));
            }
        }
        Ok(LatentEncoder {
            linear,
            cfg,
            blocks,
        })
    }

    /// Depth-0, identity-linear configuration (c = 1): z = pooled x0.
    pub fn identity(t: usize, channels: usize) -> Self {
        LatentEncoder {
            cfg: EncoderConfig {
                depth: 0,
                c: 1,
                t,
                model_dim: channels,
                heads: 1,
            },
            blocks: Vec::new(),
            linear: Dense::identity(channels, ParamGroup::Encoder),
        }
    }

    /// Input is the token form of x0: frames as rows, [T, C].
    pub fn forward(
        &self,
        tokens: &Tensor<T>,
        latent_rate: f64,
    ) -> Result<(CompressedLatent<T>, EncoderCache<T>)> {
        let frames = tokens.rows();
        if tokens.cols() != self.cfg.model_dim {
            return Err(Error::invalid(format!(
                "encoder expects {} channels, got {}",
                self.cfg.model_dim,
                tokens.cols()
            )));
        }
        if frames < self.cfg.t {
            return Err(Error::invalid(format!(
                "cannot pool {frames} frames with stride {}",
                self.cfg.t
            )));
        }
        let rope = RopeTable::for_range(frames, ROPE_BASE, self.cfg.model_dim / self.cfg.heads)?;
        let mut h = tokens.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&h, &rope, None)?;
            h = next;
            caches.push(cache);
        }
        let (reduced, linear) = self.linear.forward(&h)?;
        let z = pool_rows(&reduced, self.cfg.t)?;
        Ok((
            CompressedLatent {
                data: z,
                frame_rate: latent_rate / self.cfg.t as f64,
            },
            EncoderCache {
                blocks: caches,
                linear,
                in_frames: frames,
            },
        ))
    }

    /// Backward from dz [T', D] to d(tokens) [T, C]; parameter gradients
    /// accumulate on the layers.
    pub fn backward(&mut self, cache: &EncoderCache<T>, dz: &Tensor<T>) -> Result<Tensor<T>> {
        let rope = RopeTable::for_range(
            cache.in_frames,
            ROPE_BASE,
            self.cfg.model_dim / self.cfg.heads,
        )?;
        let dreduced = pool_rows_backward(dz, self.cfg.t, cache.in_frames);
        let mut dh = self.linear.backward(&cache.linear, &dreduced)?;
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            let (dx, _) = b.backward(c, &dh, &rope, None)?;
            dh = dx;
        }
        Ok(dh)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        self.linear.visit(&format!("{prefix}.linear"), f);
    }
}

impl<T: Scalar> Parameterized<T> for LatentEncoder<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        self.visit("encoder", f);
    }
}
