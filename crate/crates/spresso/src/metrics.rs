//! Objective evaluation: Si-SDR, a deterministic surrogate embedder,
//! Frechet distance over Gaussian embedding fits, and an MMD-based kernel
//! distance.

use crate::error::{Error, Result};
use crate::frontend::transform::{frontend_encode, FrontendConfig};
use crate::frontend::Waveform;
use crate::nn::Tensor;
use crate::rng::substream;
use nalgebra::DMatrix;

pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio in dB, capped at +100.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    let n = reference.len().max(estimate.len());
    let at = |w: &Waveform, i: usize| if i < w.len() { w.samples[i] } else { 0.0 };
    let mut rr = 0.0;
    let mut er = 0.0;
    for i in 0..n {
        let r = at(reference, i);
        rr += r * r;
        er += at(estimate, i) * r;
    }
    if rr == 0.0 {
        return Err(Error::invalid("si_sdr reference must not be all-zero"));
    }
    let alpha = er / rr;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let t = alpha * at(reference, i);
        let e = t - at(estimate, i);
        num += t * t;
        den += e * e;
    }
    if den == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (num / den).log10()).min(SI_SDR_CAP_DB))
}

pub const EMBED_DIM: usize = 32;
pub const EMBED_BANDS: usize = 24;
/// Published constant seeding the fixed random projection.
pub const EMBED_PROJECTION_SEED: u64 = 0x5EED_E4BE_D001;

/// Deterministic stand-in for a pretrained audio embedder: log mel-band
/// energies of the spectral frontend, mean+std pooled over time, projected
/// by a fixed unit-norm random matrix to 32 dims.
pub struct SurrogateEmbedder {
    cfg: FrontendConfig,
    /// Half-open coefficient-bin ranges per band.
    band_edges: Vec<(usize, usize)>,
    /// [EMBED_DIM, 2 * EMBED_BANDS], unit-norm rows.
    projection: Tensor<f64>,
}

impl Default for SurrogateEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl SurrogateEmbedder {
    pub fn new() -> Self {
        let cfg = FrontendConfig::default();
        let bins = cfg.channels();
        // bin k of the lapped transform covers ~ (k + 0.5) * nyquist / bins;
        // band edges spaced uniformly on the mel scale over bin indices
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let nyquist = 6400.0; // half the 12800 Hz reference rate
        let mel_max = mel(nyquist);
        let mut band_edges = Vec::with_capacity(EMBED_BANDS);
        let mut prev = 0usize;
        for b in 1..=EMBED_BANDS {
            let f_hi = 700.0 * (10f64.powf(mel_max * b as f64 / EMBED_BANDS as f64 / 2595.0) - 1.0);
            let mut hi = ((f_hi / nyquist) * bins as f64).round() as usize;
            hi = hi.clamp(prev + 1, bins);
            band_edges.push((prev, hi));
            prev = hi;
        }
        band_edges.last_mut().unwrap().1 = bins;

        let mut rng = substream(EMBED_PROJECTION_SEED, "corpus", &[0]);
        let mut projection = Tensor::<f64>::randn(&[EMBED_DIM, 2 * EMBED_BANDS], 1.0, &mut rng);
        for i in 0..EMBED_DIM {
            let norm = projection.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in projection.row_mut(i) {
                *v /= norm;
            }
        }
        SurrogateEmbedder {
            cfg,
            band_edges,
            projection,
        }
    }

    pub fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        if w.len() < self.cfg.window_len {
            return Err(Error::invalid(format!(
                "clip too short to embed: {} < {}",
                w.len(),
                self.cfg.window_len
            )));
        }
        let x0 = frontend_encode(w, &self.cfg)?;
        let frames = x0.frames();
        // log band energies per frame
        let mut feats = vec![0.0f64; frames * EMBED_BANDS];
        for f in 0..frames {
            for (b, &(lo, hi)) in self.band_edges.iter().enumerate() {
                let mut e = 0.0;
                for k in lo..hi {
                    let v = x0.data.at2(k, f);
                    e += v * v;
                }
                feats[f * EMBED_BANDS + b] = (e + 1e-10).ln();
            }
        }
        // mean + std pooling over time
        let mut pooled = vec![0.0f64; 2 * EMBED_BANDS];
        for b in 0..EMBED_BANDS {
            let mut mean = 0.0;
            for f in 0..frames {
                mean += feats[f * EMBED_BANDS + b];
            }
            mean /= frames as f64;
            let mut var = 0.0;
            for f in 0..frames {
                let d = feats[f * EMBED_BANDS + b] - mean;
                var += d * d;
            }
            pooled[b] = mean;
            pooled[EMBED_BANDS + b] = (var / frames as f64).sqrt();
        }
        let mut out = vec![0.0f64; EMBED_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.projection.row(i);
            *o = row.iter().zip(&pooled).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gaussian fit of a set of embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingStats {
    pub mean: Vec<f64>,
    /// [E, E], symmetric.
    pub cov: Tensor<f64>,
    pub count: usize,
}

impl EmbeddingStats {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid("need at least 2 embeddings for stats"));
        }
        let e = rows[0].len();
        if rows.iter().any(|r| r.len() != e) {
            return Err(Error::invalid("inconsistent embedding dimensions"));
        }
        let n = rows.len();
        let mut mean = vec![0.0f64; e];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = Tensor::zeros(&[e, e]);
        for r in rows {
            for i in 0..e {
                let di = r[i] - mean[i];
                let row = cov.row_mut(i);
                for j in 0..e {
                    row[j] += di * (r[j] - mean[j]);
                }
            }
        }
        cov.scale(1.0 / (n - 1) as f64);
        Ok(EmbeddingStats {
            mean,
            cov,
            count: n,
        })
    }
}

fn to_dmatrix(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.as_slice())
}

/// Symmetrize and clamp eigenvalues at zero.
fn psd_clamp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussian fits:
/// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::invalid("embedding dimension mismatch"));
    }
    let mu: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let s1 = psd_clamp(&to_dmatrix(&a.cov));
    let s2 = psd_clamp(&to_dmatrix(&b.cov));
    // Tr((S1 S2)^{1/2}) = Tr((S1^{1/2} S2 S1^{1/2})^{1/2})
    let r1 = psd_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let eig = ((&inner + inner.transpose()) * 0.5).symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mu + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

fn gaussian_kernel(a: &[f64], b: &[f64], h2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * h2)).exp()
}

fn median_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = x.iter().chain(y.iter()).collect();
    let mut dists = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let d2: f64 = all[i]
                .iter()
                .zip(all[j].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = dists[dists.len() / 2];
    if med == 0.0 {
        log::warn!("degenerate kernel bandwidth; falling back to 1.0");
        1.0
    } else {
        med
    }
}

/// Unbiased squared MMD with a Gaussian kernel at the median-heuristic
/// bandwidth. May be slightly negative by unbiasedness.
pub fn kernel_distance(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::invalid("kernel distance needs >= 2 samples per side"));
    }
    let h = median_bandwidth(x, y);
    let h2 = h * h;
    let (m, n) = (x.len(), y.len());
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += gaussian_kernel(&x[i], &x[j], h2);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += gaussian_kernel(&y[i], &y[j], h2);
            }
        }
    }
    let mut kxy = 0.0;
    for xi in x {
        for yj in y {
            kxy += gaussian_kernel(xi, yj, h2);
        }
    }
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64 - 2.0 * kxy / (m * n) as f64)
}

/// Biased (V-statistic) variant; exactly zero when X = Y.
pub fn kernel_distance_biased(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("kernel distance needs non-empty samples"));
    }
    let h = median_bandwidth(x, y);
    let h2 = h * h;
    let (m, n) = (x.len(), y.len());
    let mut kxx = 0.0;
    for xi in x {
        for xj in x {
            kxx += gaussian_kernel(xi, xj, h2);
        }
    }
    let mut kyy = 0.0;
    for yi in y {
        for yj in y {
            kyy += gaussian_kernel(yi, yj, h2);
        }
    }
    let mut kxy = 0.0;
    for xi in x {
        for yj in y {
            kxy += gaussian_kernel(xi, yj, h2);
        }
    }
    Ok(kxx / (m * m) as f64 + kyy / (n * n) as f64 - 2.0 * kxy / (m * n) as f64)
}
