//! The conditional denoiser D_theta: EDM-preconditioned transformer over x0
//! tokens, with joint attention to projected compressed-latent tokens at
//! decimated rotary positions, plus an optional class embedding.

use crate::decoder::edm::{precondition_coeffs, EdmParams};
use crate::encoder::{decimated_positions, CompressedLatent, ROPE_BASE};
use crate::error::{Error, Result};
use crate::nn::block::BlockCache;
use crate::nn::dense::DenseCache;
use crate::nn::norm::{gelu_backward, gelu_forward, RmsNormCache};
use crate::nn::param::{Param, ParamGroup, Parameterized};
use crate::nn::rope::RopeTable;
use crate::nn::tensor::{sc, Scalar, Tensor};
use crate::nn::{Dense, RmsNorm, TransformerBlock};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    /// Channel count C of the x0 token stream.
    pub channels: usize,
    /// Frame dimension D of the compressed latent z.
    pub cond_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Leading blocks with joint attention over the audio-downsampled tokens.
    pub joint_blocks: usize,
    /// Trailing audio-only blocks.
    pub audio_blocks: usize,
    pub num_classes: usize,
    pub edm: EdmParams,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            channels: 128,
            cond_dim: 64,
            model_dim: 64,
            heads: 4,
            joint_blocks: 4,
            audio_blocks: 2,
            num_classes: 5,
            edm: EdmParams::default(),
        }
    }
}

/// Conditioning inputs for one denoise call. `z_frames` is the raw
/// compressed latent (frames as rows); the denoiser projects it through
/// f_phi itself so gradients can flow back to it during training.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub z_frames: Option<Tensor<T>>,
    /// Rotary positions of the conditioning tokens within 0..T-1.
    pub positions: Vec<usize>,
    pub class_id: Option<usize>,
    pub class_dropped: bool,
}

impl<T: Scalar> Conditioning<T> {
    pub fn unconditional() -> Self {
        Conditioning {
            z_frames: None,
            positions: Vec::new(),
            class_id: None,
            class_dropped: false,
        }
    }
}

/// Assemble conditioning from a compressed latent: decimated positions for a
/// full-rate sequence of `frames` frames pooled with stride `t`.
pub fn build_conditioning<T: Scalar>(
    z: &CompressedLatent<T>,
    t: usize,
    frames: usize,
    class_id: Option<usize>,
) -> Result<Conditioning<T>> {
    if t == 0 {
        return Err(Error::invalid("stride t must be >= 1"));
    }
    let positions = decimated_positions(frames, t);
    if positions.len() != z.frames() {
        return Err(Error::invalid(format!(
            "latent has {} frames but floor({frames}/{t}) = {}",
            z.frames(),
            positions.len()
        )));
    }
    Ok(Conditioning {
        z_frames: Some(z.data.clone()),
        positions,
        class_id,
        class_dropped: false,
    })
}

/// For each of `t_len` audio frames, the latent frame feeding it on the
/// direct conditioning path: consecutive runs of the pooling stride, with the
/// tail clamped to the last latent frame.
fn upsample_map(positions: &[usize], t_len: usize, z_rows: usize) -> Vec<usize> {
    let stride = if positions.len() >= 2 {
        positions[1] - positions[0]
    } else {
        t_len.max(1)
    };
    (0..t_len).map(|i| (i / stride).min(z_rows - 1)).collect()
}

#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub cfg: DenoiserConfig,
    pub in_proj: Dense<T>,
    /// Two-layer noise-level embedding fed with c_noise.
    pub noise1: Dense<T>,
    pub noise2: Dense<T>,
    /// [num_classes + 1, model_dim]; the last row is the null/dropped class.
    pub class_emb: Param<T>,
    /// Conditioning projection f_phi: D -> model_dim.
    pub f_phi: Dense<T>,
    /// Direct additive conditioning path: the latent is upsampled to the
    /// token rate (nearest-frame hold) and projected into the stream right
    /// after the input projection, so the decoder can exploit z without
    /// first having to discover it through attention.
    pub cond_inject: Dense<T>,
    /// Conditioning skip to the output: a linear readout from the upsampled
    /// latent added to the core prediction, one layer away from the loss, so
    /// the encoder receives a strong direct gradient from the first step.
    pub cond_skip: Dense<T>,
    /// Multiplicative conditioning path (FiLM-style): the stream is scaled by
    /// 1 + gate(z). Energy-like latent features cannot reduce the denoising
    /// error through a purely additive path (the conditional mean of a
    /// sign-oscillating coefficient given its magnitude is zero), but they
    /// can through a gain applied to the noisy input stream. Zero-initialized
    /// so the gate is neutral until trained.
    pub cond_gate: Dense<T>,
    /// joint blocks first, then audio-only blocks.
    pub blocks: Vec<TransformerBlock<T>>,
    pub final_norm: RmsNorm<T>,
    pub out_proj: Dense<T>,
}

pub struct DenoiserCache<T> {
    c_skip: f64,
    c_out: f64,
    c_in: f64,
    in_proj: DenseCache<T>,
    noise1: DenseCache<T>,
    gelu_noise: Tensor<T>,
    noise2: DenseCache<T>,
    class_row: usize,
    fphi: Option<DenseCache<T>>,
    inject: Option<DenseCache<T>>,
    skip: Option<DenseCache<T>>,
    gate: Option<DenseCache<T>>,
    /// Gate values g (stream multiplier is 1 + g).
    gate_vals: Option<Tensor<T>>,
    /// Stream value before the gate multiplication.
    h_pre: Option<Tensor<T>>,
    /// Latent frame index feeding each audio frame on the direct path.
    inject_map: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    final_norm: RmsNormCache<T>,
    out_proj: DenseCache<T>,
    positions: Vec<usize>,
    t_len: usize,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        let dm = cfg.model_dim;
        let mut blocks = Vec::with_capacity(cfg.joint_blocks + cfg.audio_blocks);
        for _ in 0..cfg.joint_blocks {
            blocks.push(TransformerBlock::new(dm, cfg.heads, true, ParamGroup::Base, rng)?);
        }
        for _ in 0..cfg.audio_blocks {
            blocks.push(TransformerBlock::new(dm, cfg.heads, false, ParamGroup::Base, rng)?);
        }
        Ok(Denoiser {
            in_proj: Dense::new(dm, cfg.channels, true, ParamGroup::Base, rng),
            noise1: Dense::new(dm, 1, true, ParamGroup::Base, rng),
            noise2: Dense::new(dm, dm, true, ParamGroup::Base, rng),
            class_emb: Param::new(Tensor::randn(
                &[cfg.num_classes + 1, dm],
                0.02,
                rng,
            )),
            f_phi: Dense::new(dm, cfg.cond_dim, true, ParamGroup::Proj, rng),
            cond_inject: Dense::new(dm, cfg.cond_dim, true, ParamGroup::Proj, rng),
            cond_skip: Dense::new(cfg.channels, cfg.cond_dim, false, ParamGroup::Proj, rng),
            cond_gate: Dense::zeros(dm, cfg.cond_dim, false, ParamGroup::Proj),
            final_norm: RmsNorm::new(dm, ParamGroup::Base),
            out_proj: Dense::new(cfg.channels, dm, true, ParamGroup::Base, rng),
            blocks,
            cfg,
        })
    }

    /// Attach low-rank adapters to every attention and MLP projection of the
    /// base blocks. B is zero-initialized, so outputs are unchanged until
    /// the adapters are trained.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut impl Rng) {
        let blocks = std::mem::take(&mut self.blocks);
        self.blocks = blocks
            .into_iter()
            .map(|b| b.with_lora(rank, alpha, rng))
            .collect();
    }

    fn head_dim(&self) -> usize {
        self.cfg.model_dim / self.cfg.heads
    }

    fn class_row(&self, cond: &Conditioning<T>) -> Result<usize> {
        match cond.class_id {
            Some(id) if !cond.class_dropped => {
                if id >= self.cfg.num_classes {
                    return Err(Error::invalid(format!(
                        "class id {id} out of range (num_classes {})",
                        self.cfg.num_classes
                    )));
                }
                Ok(id)
            }
            _ => Ok(self.cfg.num_classes),
        }
    }

    /// Full preconditioned forward: x0_hat = c_skip x + c_out F(c_in x).
    /// `x_tokens` is [T, C] (frames as rows).
    pub fn forward(
        &self,
        x_tokens: &Tensor<T>,
        sigma: f64,
        cond: &Conditioning<T>,
    ) -> Result<(Tensor<T>, DenoiserCache<T>)> {
        if x_tokens.cols() != self.cfg.channels {
            return Err(Error::invalid(format!(
                "denoiser expects {} channels, got {}",
                self.cfg.channels,
                x_tokens.cols()
            )));
        }
        let (c_skip, c_out, c_in, c_noise) = precondition_coeffs(sigma, &self.cfg.edm)?;
        let t_len = x_tokens.rows();
        let rope_x = RopeTable::for_range(t_len, ROPE_BASE, self.head_dim())?;

        let mut x_in = x_tokens.clone();
        x_in.scale(sc::<T>(c_in));
        let (mut h, in_cache) = self.in_proj.forward(&x_in)?;

        let noise_in = Tensor::from_vec(&[1, 1], vec![sc::<T>(c_noise)])?;
        let (n1, n1_cache) = self.noise1.forward(&noise_in)?;
        let (ng, gelu_noise) = gelu_forward(&n1);
        let (n2, n2_cache) = self.noise2.forward(&ng)?;

        let class_row = self.class_row(cond)?;
        let emb = self.class_emb.value.row(class_row);
        let nrow = n2.row(0);
        for i in 0..t_len {
            let r = h.row_mut(i);
            for j in 0..self.cfg.model_dim {
                r[j] += nrow[j] + emb[j];
            }
        }

        let (
            ctx,
            fphi_cache,
            rope_ctx,
            inject_cache,
            inject_map,
            skip_out,
            skip_cache,
            gate_cache,
            gate_vals,
            h_pre,
        ) = match &cond.z_frames {
            Some(z) => {
                if z.cols() != self.cfg.cond_dim {
                    return Err(Error::invalid(format!(
                        "conditioning frames have dim {}, expected {}",
                        z.cols(),
                        self.cfg.cond_dim
                    )));
                }
                if cond.positions.len() != z.rows() {
                    return Err(Error::invalid(
                        "conditioning positions misaligned with latent frames",
                    ));
                }
                let rope_ctx = RopeTable::new(cond.positions.clone(), ROPE_BASE, self.head_dim())?;
                let (tokens, cache) = self.f_phi.forward(z)?;

                // direct additive path: nearest-frame hold to the token rate
                let map = upsample_map(&cond.positions, t_len, z.rows());
                let mut up = Tensor::<T>::zeros(&[t_len, self.cfg.cond_dim]);
                for (i, &r) in map.iter().enumerate() {
                    up.row_mut(i).copy_from_slice(z.row(r));
                }
                let (inj, inj_cache) = self.cond_inject.forward(&up)?;
                h.add_assign(&inj);
                let (skp, skp_cache) = self.cond_skip.forward(&up)?;
                let (gate, gt_cache) = self.cond_gate.forward(&up)?;
                let pre = h.clone();
                for i in 0..t_len {
                    let gr = gate.row(i);
                    let hr = h.row_mut(i);
                    for j in 0..gr.len() {
                        hr[j] *= T::one() + gr[j];
                    }
                }
                (
                    Some(tokens),
                    Some(cache),
                    Some(rope_ctx),
                    Some(inj_cache),
                    map,
                    Some(skp),
                    Some(skp_cache),
                    Some(gt_cache),
                    Some(gate),
                    Some(pre),
                )
            }
            None => (
                None,
                None,
                None,
                None,
                Vec::new(),
                None,
                None,
                None,
                None,
                None,
            ),
        };

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let ctx_arg = if i < self.cfg.joint_blocks {
                match (&ctx, &rope_ctx) {
                    (Some(c), Some(r)) => Some((c, r)),
                    _ => None,
                }
            } else {
                None
            };
            let (next, cache) = b.forward(&h, &rope_x, ctx_arg)?;
            h = next;
            block_caches.push(cache);
        }

        let (hn, norm_cache) = self.final_norm.forward(&h)?;
        let (mut f_out, out_cache) = self.out_proj.forward(&hn)?;
        if let Some(skp) = &skip_out {
            f_out.add_assign(skp);
        }

        let mut y = x_tokens.clone();
        y.scale(sc::<T>(c_skip));
        y.axpy(sc::<T>(c_out), &f_out);
        Ok((
            y,
            DenoiserCache {
                c_skip,
                c_out,
                c_in,
                in_proj: in_cache,
                noise1: n1_cache,
                gelu_noise,
                noise2: n2_cache,
                class_row,
                fphi: fphi_cache,
                inject: inject_cache,
                skip: skip_cache,
                gate: gate_cache,
                gate_vals,
                h_pre,
                inject_map,
                blocks: block_caches,
                final_norm: norm_cache,
                out_proj: out_cache,
                positions: cond.positions.clone(),
                t_len,
            },
        ))
    }

    /// Inference-only denoise.
    pub fn denoise(
        &self,
        x_tokens: &Tensor<T>,
        sigma: f64,
        cond: &Conditioning<T>,
    ) -> Result<Tensor<T>> {
        Ok(self.forward(x_tokens, sigma, cond)?.0)
    }

    /// Backward from d(x0_hat); accumulates parameter gradients and returns
    /// (dx_tokens, dz_frames).
    pub fn backward(
        &mut self,
        cache: &DenoiserCache<T>,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let rope_x = RopeTable::for_range(cache.t_len, ROPE_BASE, self.head_dim())?;
        let rope_ctx = if cache.fphi.is_some() {
            Some(RopeTable::new(
                cache.positions.clone(),
                ROPE_BASE,
                self.head_dim(),
            )?)
        } else {
            None
        };

        let mut df = dy.clone();
        df.scale(sc::<T>(cache.c_out));
        let dhn = self.out_proj.backward(&cache.out_proj, &df)?;
        let mut dh = self.final_norm.backward(&cache.final_norm, &dhn)?;

        let mut dctx_sum: Option<Tensor<T>> = None;
        let joint = self.cfg.joint_blocks;
        for (i, (b, c)) in self
            .blocks
            .iter_mut()
            .zip(cache.blocks.iter())
            .enumerate()
            .rev()
        {
            let rc = if i < joint { rope_ctx.as_ref() } else { None };
            let (dx, dctx) = b.backward(c, &dh, &rope_x, rc)?;
            dh = dx;
            if let Some(d) = dctx {
                match &mut dctx_sum {
                    Some(acc) => acc.add_assign(&d),
                    None => dctx_sum = Some(d),
                }
            }
        }

        // unwind the multiplicative gate: the blocks saw h_pre * (1 + g), so
        // d(h_pre) = dh * (1 + g) and d(g) = dh * h_pre
        let mut dgate: Option<Tensor<T>> = None;
        if let (Some(gv), Some(hp)) = (&cache.gate_vals, &cache.h_pre) {
            let mut dg = dh.clone();
            for i in 0..cache.t_len {
                let gr = gv.row(i);
                let hr = hp.row(i);
                let dgr = dg.row_mut(i);
                let dhr = dh.row_mut(i);
                for j in 0..gr.len() {
                    dgr[j] *= hr[j];
                    dhr[j] *= T::one() + gr[j];
                }
            }
            dgate = Some(dg);
        }

        // class embedding and noise embedding receive the summed token grad
        let dm = self.cfg.model_dim;
        let mut dtok_sum = Tensor::zeros(&[1, dm]);
        for i in 0..cache.t_len {
            let r = dh.row(i);
            let s = dtok_sum.row_mut(0);
            for j in 0..dm {
                s[j] += r[j];
            }
        }
        {
            let g = self.class_emb.grad.row_mut(cache.class_row);
            let s = dtok_sum.row(0);
            for j in 0..dm {
                g[j] += s[j];
            }
        }
        let dng = self.noise2.backward(&cache.noise2, &dtok_sum)?;
        let dn1 = gelu_backward(&cache.gelu_noise, &dng);
        self.noise1.backward(&cache.noise1, &dn1)?;

        // direct additive paths: the stream injection sees the same token
        // gradient as in_proj; the output skip sees the core output gradient
        let fold = |du: &Tensor<T>, dz: &mut Tensor<T>| {
            for (i, &r) in cache.inject_map.iter().enumerate() {
                let src = du.row(i);
                let dst = dz.row_mut(r);
                for j in 0..src.len() {
                    dst[j] += src[j];
                }
            }
        };
        let dz_direct = match (&cache.inject, &cache.skip) {
            (Some(ic), Some(skc)) => {
                let z_rows = cache.positions.len();
                let mut dz = Tensor::<T>::zeros(&[z_rows, self.cfg.cond_dim]);
                let du = self.cond_inject.backward(ic, &dh)?;
                fold(&du, &mut dz);
                let du_skip = self.cond_skip.backward(skc, &df)?;
                fold(&du_skip, &mut dz);
                if let (Some(gc), Some(dg)) = (&cache.gate, &dgate) {
                    let du_gate = self.cond_gate.backward(gc, dg)?;
                    fold(&du_gate, &mut dz);
                }
                Some(dz)
            }
            _ => None,
        };

        let mut dx = self.in_proj.backward(&cache.in_proj, &dh)?;
        dx.scale(sc::<T>(cache.c_in));
        dx.axpy(sc::<T>(cache.c_skip), dy);

        let dz_attn = match (&mut self.f_phi, &cache.fphi, dctx_sum) {
            (fphi, Some(fc), Some(dctx)) => Some(fphi.backward(fc, &dctx)?),
            _ => None,
        };
        let dz = match (dz_attn, dz_direct) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            (a, b) => a.or(b),
        };
        Ok((dx, dz))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        self.in_proj.visit(&format!("{prefix}.in_proj"), f);
        self.noise1.visit(&format!("{prefix}.noise1"), f);
        self.noise2.visit(&format!("{prefix}.noise2"), f);
        // the class table is a conditioning pathway like f_phi, so it keeps
        // training in the adapter stages rather than freezing with the base
        f(
            &format!("{prefix}.class_emb"),
            ParamGroup::Proj,
            &mut self.class_emb,
        );
        self.f_phi.visit(&format!("{prefix}.f_phi"), f);
        self.cond_inject.visit(&format!("{prefix}.cond_inject"), f);
        self.cond_skip.visit(&format!("{prefix}.cond_skip"), f);
        self.cond_gate.visit(&format!("{prefix}.cond_gate"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
        self.final_norm.visit(&format!("{prefix}.final_norm"), f);
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }
}

impl<T: Scalar> Parameterized<T> for Denoiser<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<T>)) {
        self.visit("denoiser", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tiny_cfg() -> DenoiserConfig {
        DenoiserConfig {
            channels: 6,
            cond_dim: 3,
            model_dim: 8,
            heads: 2,
            joint_blocks: 1,
            audio_blocks: 1,
            num_classes: 5,
            edm: EdmParams::default(),
        }
    }

    fn tiny_cond(rng: &mut impl rand::Rng) -> Conditioning<f64> {
        Conditioning {
            z_frames: Some(Tensor::randn(&[2, 3], 1.0, rng)),
            positions: decimated_positions(4, 2),
            class_id: Some(1),
            class_dropped: false,
        }
    }

    #[test]
    fn zero_network_reduces_to_c_skip_scaling() {
        let mut rng = substream(0, "init", &[40]);
        let mut d = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        d.out_proj = Dense::zeros(6, 8, true, ParamGroup::Base);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let sigma = 0.7;
        let y = d.denoise(&x, sigma, &Conditioning::unconditional()).unwrap();
        let (c_skip, _, _, _) = precondition_coeffs(sigma, &d.cfg.edm).unwrap();
        for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
            assert_eq!(*a, c_skip * b);
        }
    }

    #[test]
    fn lora_zero_init_leaves_output_bit_identical() {
        let mut rng = substream(0, "init", &[41]);
        let base = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let cond = tiny_cond(&mut rng);
        let y0 = base.denoise(&x, 0.3, &cond).unwrap();
        let mut adapted = base.clone();
        adapted.attach_lora(2, 4.0, &mut rng);
        let y1 = adapted.denoise(&x, 0.3, &cond).unwrap();
        assert_eq!(y0.as_slice(), y1.as_slice());
    }

    #[test]
    fn decimated_rope_phase_matches_full_table() {
        // conditioning token i must rotate with the phase of full-rate
        // position i*t + floor((t-1)/2)
        let (frames, t, hd, heads) = (40usize, 4usize, 4usize, 2usize);
        let pos = decimated_positions(frames, t);
        let full = RopeTable::<f64>::for_range(frames, ROPE_BASE, hd).unwrap();
        let dec = RopeTable::<f64>::new(pos.clone(), ROPE_BASE, hd).unwrap();
        let mut a = Tensor::filled(&[frames, heads * hd], 1.0);
        let mut b = Tensor::filled(&[pos.len(), heads * hd], 1.0);
        crate::nn::rope::rope_apply(&mut a, &full, heads, false);
        crate::nn::rope::rope_apply(&mut b, &dec, heads, false);
        for (i, &p) in pos.iter().enumerate() {
            for j in 0..heads * hd {
                assert!((a.at2(p, j) - b.at2(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropped_class_and_empty_conditioning_is_finite() {
        let mut rng = substream(0, "init", &[42]);
        let d = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let cond = Conditioning {
            z_frames: None,
            positions: Vec::new(),
            class_id: Some(2),
            class_dropped: true,
        };
        let y = d.denoise(&x, 1.3, &cond).unwrap();
        assert!(y.all_finite());
    }

    #[test]
    fn misaligned_conditioning_rejected() {
        let z = CompressedLatent {
            data: Tensor::<f64>::zeros(&[3, 3]),
            frame_rate: 1.0,
        };
        // floor(4/2) = 2 != 3 frames
        assert!(build_conditioning(&z, 2, 4, None).is_err());
    }

    #[test]
    fn input_and_conditioning_gradients_match_finite_differences() {
        let mut rng = substream(0, "init", &[43]);
        let mut d = Denoiser::<f64>::new(tiny_cfg(), &mut rng).unwrap();
        let x = Tensor::randn(&[4, 6], 0.5, &mut rng);
        let cond = tiny_cond(&mut rng);
        let sigma = 0.4;
        let (y, cache) = d.forward(&x, sigma, &cond).unwrap();
        let (dx, dz) = d.backward(&cache, &y.clone()).unwrap();
        let dz = dz.unwrap();
        let d_ref = d.clone();

        let worst_x = crate::nn::grad_check(
            &mut |v: &[f64]| {
                let xt = Tensor::from_vec(&[4, 6], v.to_vec()).unwrap();
                let (y, _) = d_ref.forward(&xt, sigma, &cond).unwrap();
                y.sq_norm() * 0.5
            },
            x.as_slice(),
            dx.as_slice(),
            1e-5,
        );
        assert!(worst_x < 1e-5, "dx worst rel err {worst_x}");

        let z0 = cond.z_frames.clone().unwrap();
        let worst_z = crate::nn::grad_check(
            &mut |v: &[f64]| {
                let mut c = cond.clone();
                c.z_frames = Some(Tensor::from_vec(&[2, 3], v.to_vec()).unwrap());
                let (y, _) = d_ref.forward(&x, sigma, &c).unwrap();
                y.sq_norm() * 0.5
            },
            z0.as_slice(),
            dz.as_slice(),
            1e-5,
        );
        assert!(worst_z < 1e-5, "dz worst rel err {worst_z}");
    }
}
