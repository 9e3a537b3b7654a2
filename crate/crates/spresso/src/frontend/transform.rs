//! Lapped orthogonal transform between waveforms and the latent grid.
//!
//! Implemented in time-domain folding form: orthogonal butterflies across
//! each block boundary followed by an orthonormal DCT-IV per block. Each
//! coefficient frame depends on window_len = 2*hop samples, and the whole
//! map is exactly invertible, so the waveform round trip is lossless to
//! machine precision — including the boundary frames, which plain
//! overlap-add MDCT framing cannot deliver with ceil(len/hop) frames.

use crate::error::{Error, Result};
use crate::frontend::{LatentTensor, Waveform};
use crate::nn::Tensor;
use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct FrontendConfig {
    pub window_len: usize,
    pub hop: usize,
    /// Per-channel divisors, length C = hop. Scale 1 everywhere when empty.
    pub channel_scale: Vec<f64>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            window_len: 256,
            hop: 128,
            channel_scale: Vec::new(),
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len != 2 * self.hop {
            return Err(Error::invalid(
                "window_len must equal 2 * hop (perfect-reconstruction constraint)",
            ));
        }
        if self.hop == 0 || self.hop % 2 != 0 {
            return Err(Error::invalid("hop must be a positive even number"));
        }
        if !self.channel_scale.is_empty() {
            if self.channel_scale.len() != self.hop {
                return Err(Error::invalid("channel_scale length must equal C = hop"));
            }
            if self.channel_scale.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::invalid("channel_scale entries must be positive"));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.hop
    }

    fn scale_for(&self, c: usize) -> f64 {
        if self.channel_scale.is_empty() {
            1.0
        } else {
            self.channel_scale[c]
        }
    }
}

/// Boundary butterfly angles: strongest rotation adjacent to the block
/// boundary, tapering toward the window edge (sine-derived taper).
fn fold_angles(hop: usize) -> Vec<(f64, f64)> {
    let h = hop / 2;
    (0..h)
        .map(|j| {
            let theta = (PI / 4.0) * (1.0 - (2 * j + 1) as f64 / hop as f64);
            (theta.cos(), theta.sin())
        })
        .collect()
}

/// Orthonormal DCT-IV matrix [n, n].
fn dct_iv(n: usize) -> Tensor<f64> {
    let mut m = Tensor::zeros(&[n, n]);
    let norm = (2.0 / n as f64).sqrt();
    for k in 0..n {
        for i in 0..n {
            m.set2(
                k,
                i,
                norm * (PI / n as f64 * (i as f64 + 0.5) * (k as f64 + 0.5)).cos(),
            );
        }
    }
    m
}

fn fold(x: &mut [f64], hop: usize, inverse: bool) {
    let angles = fold_angles(hop);
    let blocks = x.len() / hop;
    for b in 1..blocks {
        let p = b * hop;
        for (j, &(c, s)) in angles.iter().enumerate() {
            let u = x[p - 1 - j];
            let v = x[p + j];
            if inverse {
                x[p - 1 - j] = c * u + s * v;
                x[p + j] = -s * u + c * v;
            } else {
                x[p - 1 - j] = c * u - s * v;
                x[p + j] = s * u + c * v;
            }
        }
    }
}

/// Transform a waveform into the latent grid x0 [C, T] with C = hop and
/// T = ceil(len / hop).
pub fn frontend_encode(w: &Waveform, cfg: &FrontendConfig) -> Result<LatentTensor> {
    cfg.validate()?;
    if w.len() < cfg.window_len {
        return Err(Error::invalid(format!(
            "waveform length {} shorter than window_len {}",
            w.len(),
            cfg.window_len
        )));
    }
    let n = cfg.hop;
    let t = w.len().div_ceil(n);
    let mut x = w.samples.clone();
    x.resize(t * n, 0.0);
    fold(&mut x, n, false);
    let dct = dct_iv(n);
    let mut out = Tensor::zeros(&[n, t]);
    for b in 0..t {
        let blk = &x[b * n..(b + 1) * n];
        for k in 0..n {
            let row = dct.row(k);
            let mut s = 0.0;
            for i in 0..n {
                s += row[i] * blk[i];
            }
            out.set2(k, b, s / cfg.scale_for(k));
        }
    }
    Ok(LatentTensor {
        data: out,
        latent_rate: w.sample_rate as f64 / n as f64,
    })
}

/// Inverse transform. Output length is frames * hop, clipped to [-1, 1].
pub fn frontend_decode(x0: &LatentTensor, cfg: &FrontendConfig) -> Result<Waveform> {
    cfg.validate()?;
    let n = cfg.hop;
    if x0.channels() != n {
        return Err(Error::invalid(format!(
            "latent has {} channels, config expects {}",
            x0.channels(),
            n
        )));
    }
    let t = x0.frames();
    let dct = dct_iv(n);
    let mut x = vec![0.0f64; t * n];
    for b in 0..t {
        let blk = &mut x[b * n..(b + 1) * n];
        for k in 0..n {
            let coeff = x0.data.at2(k, b) * cfg.scale_for(k);
            let row = dct.row(k);
            for i in 0..n {
                blk[i] += coeff * row[i];
            }
        }
    }
    fold(&mut x, n, true);
    let sample_rate = (x0.latent_rate * n as f64).round() as u32;
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    Waveform::new(x, sample_rate)
}

/// Raw (unclipped) inverse, used internally where the linearity contract
/// matters more than the DAC range.
pub fn frontend_decode_unclipped(x0: &LatentTensor, cfg: &FrontendConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.hop;
    if x0.channels() != n {
        return Err(Error::invalid("latent channel mismatch"));
    }
    let t = x0.frames();
    let dct = dct_iv(n);
    let mut x = vec![0.0f64; t * n];
    for b in 0..t {
        let blk = &mut x[b * n..(b + 1) * n];
        for k in 0..n {
            let coeff = x0.data.at2(k, b) * cfg.scale_for(k);
            let row = dct.row(k);
            for i in 0..n {
                blk[i] += coeff * row[i];
            }
        }
    }
    fold(&mut x, n, true);
    Ok(x)
}

/// Fit per-channel divisors so that the per-channel standard deviation of
/// the scaled corpus latents equals `sigma_data`. Degenerate channels fall
/// back to scale 1.
pub fn fit_channel_scale(
    corpus: &[Waveform],
    cfg: &FrontendConfig,
    sigma_data: f64,
) -> Result<Vec<f64>> {
    if corpus.len() < 16 {
        return Err(Error::invalid(format!(
            "need at least 16 clips to fit channel scales, got {}",
            corpus.len()
        )));
    }
    let unscaled = FrontendConfig {
        channel_scale: Vec::new(),
        ..cfg.clone()
    };
    let c = cfg.channels();
    let mut sum_sq = vec![0.0f64; c];
    let mut count = 0usize;
    for w in corpus {
        // silent clips carry no scale information and must not dilute the fit
        if w.peak() == 0.0 {
            continue;
        }
        let x0 = frontend_encode(w, &unscaled)?;
        for ch in 0..c {
            for f in 0..x0.frames() {
                sum_sq[ch] += x0.data.at2(ch, f).powi(2);
            }
        }
        count += x0.frames();
    }
    let scales = sum_sq
        .iter()
        .enumerate()
        .map(|(ch, &ss)| {
            let std = (ss / count as f64).sqrt();
            if std < 1e-12 {
                log::warn!("channel {ch} is degenerate (all-zero); scale fixed at 1");
                1.0
            } else {
                std / sigma_data
            }
        })
        .collect();
    Ok(scales)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::synth::{synth_clip, ClipKind};
    use crate::metrics::si_sdr;
    use crate::rng::substream;
    use rand_distr::{Distribution, StandardNormal};

    fn cfg() -> FrontendConfig {
        FrontendConfig::default()
    }

    #[test]
    fn hundred_frames_per_second_at_desk_rate() {
        let w = synth_clip(ClipKind::Impact, 1.0, 7).unwrap();
        let x0 = frontend_encode(&w, &cfg()).unwrap();
        assert_eq!(x0.channels(), 128);
        assert_eq!(x0.frames(), 100);
        assert!((x0.latent_rate - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_waveform_gives_zero_latent() {
        let w = Waveform::new(vec![0.0; 1024], 12800).unwrap();
        let x0 = frontend_encode(&w, &cfg()).unwrap();
        assert!(x0.data.as_slice().iter().all(|&v| v == 0.0));
        let back = frontend_decode(&x0, &cfg()).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_input_rejected() {
        let w = Waveform::new(vec![0.1; 100], 12800).unwrap();
        assert!(frontend_encode(&w, &cfg()).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = substream(0, "corpus", &[77]);
        let samples: Vec<f64> = (0..2500)
            .map(|_| {
                (0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .clamp(-0.95, 0.95)
            })
            .collect();
        let w = Waveform::new(samples, 12800).unwrap();
        let x0 = frontend_encode(&w, &cfg()).unwrap();
        let raw = frontend_decode_unclipped(&x0, &cfg()).unwrap();
        for (a, b) in w.samples.iter().zip(&raw) {
            assert!((a - b).abs() < 1e-10);
        }
        // tail padding reconstructs as zeros
        for &v in &raw[w.len()..] {
            assert!(v.abs() < 1e-10);
        }
        let back = frontend_decode(&x0, &cfg()).unwrap();
        let sdr = si_sdr(&w, &back).unwrap();
        assert!(sdr >= 60.0, "si-sdr {sdr}");
    }

    #[test]
    fn unit_impulse_round_trips_at_correct_offset() {
        let mut samples = vec![0.0; 1000];
        samples[437] = 0.8;
        let w = Waveform::new(samples, 12800).unwrap();
        let x0 = frontend_encode(&w, &cfg()).unwrap();
        let back = frontend_decode(&x0, &cfg()).unwrap();
        for (i, (&a, &b)) in w.samples.iter().zip(&back.samples).enumerate() {
            assert!((a - b).abs() < 1e-6, "sample {i}: {a} vs {b}");
        }
    }

    #[test]
    fn transform_is_linear() {
        let mut rng = substream(0, "corpus", &[78]);
        let mk = |rng: &mut _| -> Waveform {
            let s: Vec<f64> = (0..1200)
                .map(|_| 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            Waveform::new(s, 12800).unwrap()
        };
        let w1 = mk(&mut rng);
        let w2 = mk(&mut rng);
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = w1
            .samples
            .iter()
            .zip(&w2.samples)
            .map(|(x, y)| a * x + b * y)
            .collect();
        let wm = Waveform::new(mix, 12800).unwrap();
        let e1 = frontend_encode(&w1, &cfg()).unwrap();
        let e2 = frontend_encode(&w2, &cfg()).unwrap();
        let em = frontend_encode(&wm, &cfg()).unwrap();
        for i in 0..em.data.len() {
            let expect = a * e1.data.as_slice()[i] + b * e2.data.as_slice()[i];
            assert!((em.data.as_slice()[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn scaled_latent_doubles_waveform_before_clipping() {
        let w = synth_clip(ClipKind::AmTexture, 0.5, 5).unwrap();
        let x0 = frontend_encode(&w, &cfg()).unwrap();
        let mut x2 = x0.clone();
        x2.data.scale(2.0);
        let raw1 = frontend_decode_unclipped(&x0, &cfg()).unwrap();
        let raw2 = frontend_decode_unclipped(&x2, &cfg()).unwrap();
        for (a, b) in raw1.iter().zip(&raw2) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_scale_normalizes_std() {
        let mut clips = Vec::new();
        for seed in 0..24 {
            let mut rng = substream(3, "corpus", &[seed]);
            let s: Vec<f64> = (0..1280).map(|_| StandardNormal.sample(&mut rng)).collect();
            clips.push(Waveform::new(s, 12800).unwrap());
        }
        let scales = fit_channel_scale(&clips, &cfg(), 0.5).unwrap();
        let scaled_cfg = FrontendConfig {
            channel_scale: scales,
            ..cfg()
        };
        // recompute per-channel std with the fitted scales
        let c = scaled_cfg.channels();
        let mut sum_sq = vec![0.0f64; c];
        let mut count = 0usize;
        for w in &clips {
            let x0 = frontend_encode(w, &scaled_cfg).unwrap();
            for ch in 0..c {
                for f in 0..x0.frames() {
                    sum_sq[ch] += x0.data.at2(ch, f).powi(2);
                }
            }
            count += x0.frames();
        }
        for ch in 0..c {
            let std = (sum_sq[ch] / count as f64).sqrt();
            assert!((std - 0.5).abs() <= 0.025, "channel {ch} std {std}");
        }
    }

    #[test]
    fn channel_scale_deterministic() {
        let clips: Vec<Waveform> = (0..16)
            .map(|s| synth_clip(ClipKind::NoiseBurst, 0.3, s).unwrap())
            .collect();
        let a = fit_channel_scale(&clips, &cfg(), 0.5).unwrap();
        let b = fit_channel_scale(&clips, &cfg(), 0.5).unwrap();
        assert_eq!(a, b);
    }
}
