//! Deterministic synthetic sound-effect generator: impacts, chirps, noise
//! bursts, AM textures and mixtures, all seeded.

use crate::error::{Error, Result};
use crate::frontend::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::rng::substream;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClipKind {
    Impact,
    Chirp,
    NoiseBurst,
    AmTexture,
    Mixture,
}

impl ClipKind {
    pub const ALL: [ClipKind; 5] = [
        ClipKind::Impact,
        ClipKind::Chirp,
        ClipKind::NoiseBurst,
        ClipKind::AmTexture,
        ClipKind::Mixture,
    ];

    pub fn id(self) -> usize {
        match self {
            ClipKind::Impact => 0,
            ClipKind::Chirp => 1,
            ClipKind::NoiseBurst => 2,
            ClipKind::AmTexture => 3,
            ClipKind::Mixture => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClipKind::Impact => "impact",
            ClipKind::Chirp => "chirp",
            ClipKind::NoiseBurst => "noise_burst",
            ClipKind::AmTexture => "am_texture",
            ClipKind::Mixture => "mixture",
        }
    }
}

impl FromStr for ClipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "impact" => Ok(ClipKind::Impact),
            "chirp" => Ok(ClipKind::Chirp),
            "noise_burst" => Ok(ClipKind::NoiseBurst),
            "am_texture" => Ok(ClipKind::AmTexture),
            "mixture" => Ok(ClipKind::Mixture),
            other => Err(Error::invalid(format!("unknown clip kind: {other}"))),
        }
    }
}

/// Generate one clip; deterministic in (kind, seed), peak at most 0.99.
pub fn synth_clip(kind: ClipKind, duration_s: f64, seed: u64) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    let sr = DEFAULT_SAMPLE_RATE;
    let n = (duration_s * sr as f64).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration too short for one sample"));
    }
    let mut rng = substream(seed, "synth", &[kind.id() as u64]);
    let mut samples = render(kind, n, sr, &mut rng);
    normalize(&mut samples);
    Waveform::new(samples, sr)
}

fn render(kind: ClipKind, n: usize, sr: u32, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let dt = 1.0 / sr as f64;
    match kind {
        ClipKind::Impact => {
            // exponentially decaying burst of a few sinusoidal modes
            let onset = (rng.gen_range(0.0..0.2) * n as f64) as usize;
            let modes = rng.gen_range(2..=4);
            let mut out = vec![0.0; n];
            for _ in 0..modes {
                let f = rng.gen_range(150.0..2500.0);
                let tau = rng.gen_range(0.02..0.25);
                let amp = rng.gen_range(0.3..1.0);
                let phase = rng.gen_range(0.0..2.0 * PI);
                for (i, o) in out.iter_mut().enumerate().skip(onset) {
                    let t = (i - onset) as f64 * dt;
                    *o += amp * (-t / tau).exp() * (2.0 * PI * f * t + phase).sin();
                }
            }
            out
        }
        ClipKind::Chirp => {
            let f0 = rng.gen_range(80.0..300.0);
            let f1 = rng.gen_range(2500.0..5500.0);
            let dur = n as f64 * dt;
            let k = (f1 - f0) / dur;
            (0..n)
                .map(|i| {
                    let t = i as f64 * dt;
                    let env = (PI * t / dur).sin().powf(0.5);
                    env * (2.0 * PI * (f0 * t + 0.5 * k * t * t)).sin()
                })
                .collect()
        }
        ClipKind::NoiseBurst => {
            // one-pole lowpassed white noise under an attack/decay envelope
            let alpha = rng.gen_range(0.15..0.9);
            let attack = rng.gen_range(0.005..0.05);
            let decay = rng.gen_range(0.05..0.4);
            let onset = (rng.gen_range(0.0..0.3) * n as f64) as usize;
            let mut state = 0.0;
            (0..n)
                .map(|i| {
                    let white: f64 = StandardNormal.sample(rng);
                    state = alpha * white + (1.0 - alpha) * state;
                    if i < onset {
                        return 0.0;
                    }
                    let t = (i - onset) as f64 * dt;
                    let env = (1.0 - (-t / attack).exp()) * (-t / decay).exp();
                    env * state
                })
                .collect()
        }
        ClipKind::AmTexture => {
            let carrier = rng.gen_range(200.0..3000.0);
            let mod_rate = rng.gen_range(2.0..12.0);
            let depth = rng.gen_range(0.4..1.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| {
                    let t = i as f64 * dt;
                    let am = 1.0 - depth * 0.5 * (1.0 - (2.0 * PI * mod_rate * t).cos());
                    am * (2.0 * PI * carrier * t + phase).sin()
                })
                .collect()
        }
        ClipKind::Mixture => {
            let parts = rng.gen_range(2..=3);
            let mut out = vec![0.0; n];
            for _ in 0..parts {
                let k = [
                    ClipKind::Impact,
                    ClipKind::Chirp,
                    ClipKind::NoiseBurst,
                    ClipKind::AmTexture,
                ][rng.gen_range(0..4)];
                let gain = rng.gen_range(0.3..1.0);
                let mut part = render(k, n, sr, rng);
                normalize(&mut part);
                for (o, p) in out.iter_mut().zip(&part) {
                    *o += gain * p;
                }
            }
            out
        }
    }
}

fn normalize(samples: &mut [f64]) {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let g = 0.95 / peak;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
}
