//! Offline residual quantization of compressed latents (Qinco-lite):
//! staged codebooks trained by k-means on residuals, an optional per-stage
//! neural adapter conditioned on the running reconstruction, greedy or beam
//! encoding, and the exact bitrate arithmetic.

use crate::encoder::CompressedLatent;
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::norm::{gelu_backward, gelu_forward};
use crate::nn::param::{adamw_step, AdamConfig, Param, ParamGroup, Parameterized};
use crate::nn::tensor::Tensor;
use crate::nn::Dense;
use crate::rng::substream;
use num_rational::Ratio;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct QuantizerConfig {
    /// Stage count.
    pub m: usize,
    /// Codebook size.
    pub k: usize,
    pub kmeans_iters: usize,
    /// Enable the per-stage neural adapter (plain RVQ when false).
    pub adapters: bool,
    pub adapter_hidden: usize,
    pub adapter_steps: usize,
    pub adapter_lr: f64,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            m: 20,
            k: 1024,
            kmeans_iters: 25,
            adapters: false,
            adapter_hidden: 32,
            adapter_steps: 200,
            adapter_lr: 1e-3,
            seed: 0,
        }
    }
}

/// 2-layer perceptron mapping (running reconstruction ⊕ base codeword) to a
/// centroid correction. Code index 0 of refinement stages bypasses the
/// adapter and is pinned to the exact zero vector.
#[derive(Clone, Debug)]
pub struct StageAdapter {
    pub fc1: Dense<f64>,
    pub fc2: Dense<f64>,
}

impl StageAdapter {
    fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        StageAdapter {
            fc1: Dense::new(hidden, 2 * dim, true, ParamGroup::Other, rng),
            fc2: Dense::zeros(dim, hidden, true, ParamGroup::Other),
        }
    }

    /// delta([recon ⊕ codeword]) for a batch of rows [n, 2D] -> [n, D].
    fn forward(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (h, _) = self.fc1.forward(input)?;
        let (g, _) = gelu_forward(&h);
        let (d, _) = self.fc2.forward(&g)?;
        Ok(d)
    }
}

impl Parameterized<f64> for StageAdapter {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamGroup, &mut Param<f64>)) {
        self.fc1.visit("fc1", f);
        self.fc2.visit("fc2", f);
    }
}

#[derive(Clone, Debug)]
pub struct QuantizerModel {
    pub dim: usize,
    /// M codebooks of shape [K, D].
    pub codebooks: Vec<Tensor<f64>>,
    pub adapters: Option<Vec<StageAdapter>>,
    /// Training distortion after each cumulative stage.
    pub stage_mse: Vec<f64>,
}

impl QuantizerModel {
    pub fn stages(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].rows()
    }

    /// Effective candidate codewords of `stage` given the running
    /// reconstruction of one frame: [K, D].
    fn candidates(&self, stage: usize, recon: &[f64]) -> Result<Tensor<f64>> {
        let base = &self.codebooks[stage];
        let adapter = self.adapters.as_ref().map(|a| &a[stage]);
        match adapter {
            None => Ok(base.clone()),
            Some(ad) => {
                let (k, d) = (base.rows(), base.cols());
                let mut input = Tensor::zeros(&[k, 2 * d]);
                for i in 0..k {
                    let row = input.row_mut(i);
                    row[..d].copy_from_slice(recon);
                    row[d..].copy_from_slice(base.row(i));
                }
                let delta = ad.forward(&input)?;
                let mut out = base.clone();
                out.add_assign(&delta);
                if stage > 0 {
                    // pinned zero entry bypasses the adapter
                    for v in out.row_mut(0) {
                        *v = 0.0;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Integer code grid: codes[frame * M + stage].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeGrid {
    pub m: usize,
    pub k: usize,
    pub frames: usize,
    pub codes: Vec<u32>,
}

impl CodeGrid {
    pub fn code(&self, frame: usize, stage: usize) -> u32 {
        self.codes[frame * self.m + stage]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means with k-means++ init. Empty clusters keep their previous
/// centroid. Returns centroids [k, D].
fn kmeans(points: &Tensor<f64>, k: usize, iters: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let (n, d) = (points.rows(), points.cols());
    // k-means++ seeding
    let mut centroids = Tensor::zeros(&[k, d]);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut best_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = best_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let d2 = sq_dist(points.row(i), centroids.row(c));
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
    }
    // Lloyd iterations
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for i in 0..n {
            let p = points.row(i);
            let mut best = 0usize;
            let mut bd = f64::INFINITY;
            for c in 0..k {
                let d2 = sq_dist(p, centroids.row(c));
                if d2 < bd {
                    bd = d2;
                    best = c;
                }
            }
            assign[i] = best;
        }
        let mut sums = Tensor::<f64>::zeros(&[k, d]);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            let s = sums.row_mut(assign[i]);
            for (j, &v) in points.row(i).iter().enumerate() {
                s[j] += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let s = sums.row(c).to_vec();
                let cr = centroids.row_mut(c);
                for j in 0..d {
                    cr[j] = s[j] / counts[c] as f64;
                }
            }
        }
    }
    centroids
}

fn count_distinct(frames: &Tensor<f64>) -> usize {
    let mut keys: Vec<Vec<u64>> = (0..frames.rows())
        .map(|i| frames.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

/// Train staged codebooks on a frame set [N, D]. Stage m runs k-means over
/// the residuals left by stages < m; refinement stages pin the zero vector
/// at code 0 so adding a stage can never increase training distortion.
pub fn train_codebooks(frames: &Tensor<f64>, cfg: &QuantizerConfig) -> Result<QuantizerModel> {
    if cfg.m == 0 || cfg.k == 0 {
        return Err(Error::invalid("quantizer needs m >= 1 and k >= 1"));
    }
    let (n, d) = (frames.rows(), frames.cols());
    if n == 0 {
        return Err(Error::invalid("empty frame set"));
    }
    let distinct = count_distinct(frames);
    let k = if distinct < cfg.k {
        log::warn!(
            "only {distinct} distinct frames; reducing codebook size from {} to {distinct}",
            cfg.k
        );
        distinct
    } else {
        cfg.k
    };

    let mut residual = frames.clone();
    let mut codebooks = Vec::with_capacity(cfg.m);
    let mut adapters: Option<Vec<StageAdapter>> = cfg.adapters.then(Vec::new);
    let mut recon = Tensor::zeros(&[n, d]);
    let mut stage_mse = Vec::with_capacity(cfg.m);

    for stage in 0..cfg.m {
        let mut rng = substream(cfg.seed, "kmeans", &[stage as u64]);
        let mut cb = kmeans(&residual, k, cfg.kmeans_iters, &mut rng);
        if stage > 0 && k >= 2 {
            // pin the exact zero vector at the entry nearest the origin
            let zero = vec![0.0f64; d];
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(cb.row(a), &zero)
                        .partial_cmp(&sq_dist(cb.row(b), &zero))
                        .unwrap()
                })
                .unwrap();
            cb.as_mut_slice().copy_within(0..d, nearest * d);
            for v in &mut cb.row_mut(0)[..] {
                *v = 0.0;
            }
        }

        if let Some(ads) = &mut adapters {
            let mut ad = StageAdapter::new(d, cfg.adapter_hidden, &mut rng);
            train_adapter(&mut ad, &recon, &cb, &residual, cfg)?;
            ads.push(ad);
        }
        codebooks.push(cb);

        // greedy-assign this stage to update residuals and recon
        let model = QuantizerModel {
            dim: d,
            codebooks: codebooks.clone(),
            adapters: adapters.clone(),
            stage_mse: Vec::new(),
        };
        let mut mse = 0.0;
        for i in 0..n {
            let cands = model.candidates(stage, recon.row(i))?;
            let r = residual.row(i).to_vec();
            let best = (0..cands.rows())
                .min_by(|&a, &b| {
                    sq_dist(&r, cands.row(a))
                        .partial_cmp(&sq_dist(&r, cands.row(b)))
                        .unwrap()
                })
                .unwrap();
            let cw = cands.row(best).to_vec();
            let rr = residual.row_mut(i);
            for j in 0..d {
                rr[j] -= cw[j];
                mse += rr[j] * rr[j];
            }
            let rc = recon.row_mut(i);
            for j in 0..d {
                rc[j] += cw[j];
            }
        }
        mse /= (n * d) as f64;
        if let Some(&prev) = stage_mse.last() {
            debug_assert!(mse <= prev + 1e-12, "stage {stage} raised MSE");
        }
        stage_mse.push(mse);
    }

    Ok(QuantizerModel {
        dim: d,
        codebooks,
        adapters,
        stage_mse,
    })
}

/// Fit one stage adapter by AdamW on the stage reconstruction MSE:
/// target delta = residual - nearest base codeword.
fn train_adapter(
    ad: &mut StageAdapter,
    recon: &Tensor<f64>,
    cb: &Tensor<f64>,
    residual: &Tensor<f64>,
    cfg: &QuantizerConfig,
) -> Result<()> {
    let (n, d) = (residual.rows(), residual.cols());
    let k = cb.rows();
    let mut inputs = Tensor::zeros(&[n, 2 * d]);
    let mut targets = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let r = residual.row(i);
        let best = (0..k)
            .min_by(|&a, &b| {
                sq_dist(r, cb.row(a))
                    .partial_cmp(&sq_dist(r, cb.row(b)))
                    .unwrap()
            })
            .unwrap();
        let row = inputs.row_mut(i);
        row[..d].copy_from_slice(recon.row(i));
        row[d..].copy_from_slice(cb.row(best));
        let t = targets.row_mut(i);
        for j in 0..d {
            t[j] = r[j] - cb.row(best)[j];
        }
    }
    let adam = AdamConfig {
        lr: cfg.adapter_lr,
        ..Default::default()
    };
    for step in 1..=cfg.adapter_steps as u64 {
        ad.zero_grads();
        let (h, c1) = ad.fc1.forward(&inputs)?;
        let (g, gc) = gelu_forward(&h);
        let (pred, c2) = ad.fc2.forward(&g)?;
        let mut dpred = pred;
        dpred.axpy(-1.0, &targets);
        dpred.scale(2.0 / (n * d) as f64);
        let dg = ad.fc2.backward(&c2, &dpred)?;
        let dh = gelu_backward(&gc, &dg);
        ad.fc1.backward(&c1, &dh)?;
        adamw_step(ad, &|_| true, &adam, step)?;
    }
    Ok(())
}

/// Quantize each frame of z through the staged codebooks. `beam` = 1 is
/// greedy; larger beams keep that many running hypotheses per frame and a
/// beam of K^M is exhaustive.
pub fn quantize(
    z: &CompressedLatent<f64>,
    q: &QuantizerModel,
    beam: usize,
) -> Result<(CodeGrid, CompressedLatent<f64>)> {
    if z.dim() != q.dim {
        return Err(Error::invalid(format!(
            "latent dim {} does not match quantizer dim {}",
            z.dim(),
            q.dim
        )));
    }
    if beam == 0 {
        return Err(Error::invalid("beam width must be >= 1"));
    }
    let (m, k, d) = (q.stages(), q.codebook_size(), q.dim);
    let frames = z.frames();
    let mut codes = vec![0u32; frames * m];
    let mut zq = Tensor::zeros(&[frames, d]);

    struct Hyp {
        codes: Vec<u32>,
        recon: Vec<f64>,
        err: f64,
    }
    for f in 0..frames {
        let target = z.data.row(f);
        let mut hyps = vec![Hyp {
            codes: Vec::new(),
            recon: vec![0.0; d],
            err: target.iter().map(|v| v * v).sum(),
        }];
        for stage in 0..m {
            let mut next: Vec<Hyp> = Vec::with_capacity(hyps.len() * k);
            for h in &hyps {
                let cands = q.candidates(stage, &h.recon)?;
                for c in 0..k {
                    let cw = cands.row(c);
                    let mut recon = h.recon.clone();
                    let mut err = 0.0;
                    for j in 0..d {
                        recon[j] += cw[j];
                        let e = target[j] - recon[j];
                        err += e * e;
                    }
                    let mut cs = h.codes.clone();
                    cs.push(c as u32);
                    next.push(Hyp {
                        codes: cs,
                        recon,
                        err,
                    });
                }
            }
            next.sort_by(|a, b| a.err.partial_cmp(&b.err).unwrap());
            next.truncate(beam);
            hyps = next;
        }
        let best = &hyps[0];
        codes[f * m..(f + 1) * m].copy_from_slice(&best.codes);
        zq.row_mut(f).copy_from_slice(&best.recon);
    }
    Ok((
        CodeGrid {
            m,
            k,
            frames,
            codes,
        },
        CompressedLatent {
            data: zq,
            frame_rate: z.frame_rate,
        },
    ))
}

/// Reconstruct from the first `m_use` stages. `m_use = M` reproduces the
/// quantize output bit-exactly.
pub fn dequantize(
    codes: &CodeGrid,
    q: &QuantizerModel,
    m_use: usize,
    frame_rate: f64,
) -> Result<CompressedLatent<f64>> {
    if m_use == 0 || m_use > q.stages() {
        return Err(Error::invalid(format!(
            "m_use {m_use} out of range 1..={}",
            q.stages()
        )));
    }
    if codes.m != q.stages() || codes.k != q.codebook_size() {
        return Err(Error::invalid("code grid geometry does not match quantizer"));
    }
    let d = q.dim;
    let mut out = Tensor::zeros(&[codes.frames, d]);
    for f in 0..codes.frames {
        let mut recon = vec![0.0f64; d];
        for stage in 0..m_use {
            let cands = q.candidates(stage, &recon)?;
            let cw = cands.row(codes.code(f, stage) as usize);
            for j in 0..d {
                recon[j] += cw[j];
            }
        }
        out.row_mut(f).copy_from_slice(&recon);
    }
    Ok(CompressedLatent {
        data: out,
        frame_rate,
    })
}

/// Exact bitrate M * log2(K) * f in bits per second, computed with rational
/// arithmetic over a 5-second reference clip: frames = floor(5 f), payload
/// bits / 5 s. For integer frame rates this equals M * log2 K * f exactly.
pub fn bitrate(m: u64, k: u64, frame_rate: Ratio<u64>) -> Result<Ratio<u64>> {
    if m == 0 {
        return Err(Error::invalid("m must be >= 1"));
    }
    if k < 2 || !k.is_power_of_two() {
        return Err(Error::invalid(format!(
            "codebook size {k} must be a power of two (bit packing)"
        )));
    }
    let log2k = k.trailing_zeros() as u64;
    let frames_5s = (frame_rate * Ratio::from_integer(5)).floor().to_integer();
    Ok(Ratio::new(m * log2k * frames_5s, 5))
}

/// Compression ratio R = sample_rate / (D * f).
pub fn compression_ratio(sample_rate: u64, d: u64, frame_rate: Ratio<u64>) -> Result<Ratio<u64>> {
    if d == 0 || frame_rate.numer() == &0 {
        return Err(Error::invalid("d and frame rate must be positive"));
    }
    Ok(Ratio::from_integer(sample_rate) / (Ratio::from_integer(d) * frame_rate))
}

/// Finetuning stage count for a given codebook bit width: the ~100-bit
/// vocabulary heuristic, with the two published operating points pinned.
pub fn select_finetune_m(k_bits: u32) -> usize {
    match k_bits {
        10 => 10,
        12 => 8,
        _ => ((100.0 / k_bits as f64).round() as usize).max(1),
    }
}

/// Serialize a quantizer model into a checkpoint container.
pub fn save_quantizer(q: &QuantizerModel, path: &std::path::Path) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.insert_scalar("q.m", q.stages() as f64);
    ck.insert_scalar("q.k", q.codebook_size() as f64);
    ck.insert_scalar("q.dim", q.dim as f64);
    ck.insert_scalar("q.adapters", if q.adapters.is_some() { 1.0 } else { 0.0 });
    for (i, cb) in q.codebooks.iter().enumerate() {
        ck.insert(&format!("q.codebook{i}"), cb);
    }
    if let Some(ads) = &q.adapters {
        for (i, ad) in ads.iter().enumerate() {
            let mut ad = ad.clone();
            crate::nn::checkpoint::pack_params(&mut ck, &mut ad, &format!("q.adapter{i}"));
        }
    }
    let mse = Tensor::from_vec(&[q.stage_mse.len()], q.stage_mse.clone())?;
    ck.insert("q.stage_mse", &mse);
    ck.save(path)
}

pub fn load_quantizer(path: &std::path::Path) -> Result<QuantizerModel> {
    let ck = Checkpoint::load(path)?;
    let m = ck.get_scalar("q.m")? as usize;
    let k = ck.get_scalar("q.k")? as usize;
    let dim = ck.get_scalar("q.dim")? as usize;
    let has_adapters = ck.get_scalar("q.adapters")? != 0.0;
    let mut codebooks = Vec::with_capacity(m);
    for i in 0..m {
        let cb = ck.get::<f64>(&format!("q.codebook{i}"))?;
        if cb.shape() != [k, dim] {
            return Err(Error::Format(format!(
                "codebook {i} has shape {:?}, expected [{k}, {dim}]",
                cb.shape()
            )));
        }
        codebooks.push(cb);
    }
    let adapters = if has_adapters {
        let mut ads = Vec::with_capacity(m);
        for i in 0..m {
            // shape container; weights restored below
            let mut rng = substream(0, "kmeans", &[u64::MAX]);
            let hidden = ck
                .get::<f64>(&format!("q.adapter{i}.fc1.w"))?
                .rows();
            let mut ad = StageAdapter::new(dim, hidden, &mut rng);
            crate::nn::checkpoint::unpack_params(&ck, &mut ad, &format!("q.adapter{i}"))?;
            ads.push(ad);
        }
        Some(ads)
    } else {
        None
    };
    let stage_mse = ck.get::<f64>("q.stage_mse")?.as_slice().to_vec();
    Ok(QuantizerModel {
        dim,
        codebooks,
        adapters,
        stage_mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(data: Tensor<f64>) -> CompressedLatent<f64> {
        CompressedLatent {
            data,
            frame_rate: 1.0,
        }
    }

    fn toy_model(codebooks: Vec<Tensor<f64>>) -> QuantizerModel {
        QuantizerModel {
            dim: codebooks[0].cols(),
            codebooks,
            adapters: None,
            stage_mse: Vec::new(),
        }
    }

    #[test]
    fn hand_worked_two_stage_scalar_instance() {
        // stage-1 centroids {0, 1}, stage-2 {-0.25, +0.25}; input 0.8
        let q = toy_model(vec![
            Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap(),
            Tensor::from_vec(&[2, 1], vec![-0.25, 0.25]).unwrap(),
        ]);
        let z = latent(Tensor::from_vec(&[1, 1], vec![0.8]).unwrap());
        let (codes, zq) = quantize(&z, &q, 1).unwrap();
        assert_eq!(&codes.codes, &[1, 0]);
        assert!((zq.data.as_slice()[0] - 0.75).abs() < 1e-12);
        // truncation: m_use = 1 -> 1.0, m_use = 2 -> 0.75
        let d1 = dequantize(&codes, &q, 1, 1.0).unwrap();
        assert!((d1.data.as_slice()[0] - 1.0).abs() < 1e-12);
        let d2 = dequantize(&codes, &q, 2, 1.0).unwrap();
        assert_eq!(d2.data.as_slice(), zq.data.as_slice());
    }

    #[test]
    fn exact_centroid_with_zero_refinements_has_zero_error() {
        let q = toy_model(vec![
            Tensor::from_vec(&[2, 1], vec![0.3, -0.6]).unwrap(),
            Tensor::from_vec(&[2, 1], vec![0.0, 0.5]).unwrap(),
        ]);
        let z = latent(Tensor::from_vec(&[1, 1], vec![-0.6]).unwrap());
        let (_, zq) = quantize(&z, &q, 1).unwrap();
        assert_eq!(zq.data.as_slice()[0], -0.6);
    }

    #[test]
    fn separable_clusters_reach_kmeans_oracle() {
        let mut rng = substream(5, "kmeans", &[99]);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut data = Vec::new();
        for i in 0..90 {
            let c = centers[i % 3];
            data.push(c[0] + rng.gen_range(-1e-4..1e-4));
            data.push(c[1] + rng.gen_range(-1e-4..1e-4));
        }
        let frames = Tensor::from_vec(&[90, 2], data).unwrap();
        let cfg = QuantizerConfig {
            m: 1,
            k: 3,
            seed: 5,
            ..Default::default()
        };
        let q = train_codebooks(&frames, &cfg).unwrap();
        let spread = 200.0; // squared inter-cluster scale ~ 10^2 * 2
        assert!(q.stage_mse[0] < 1e-6 * spread, "mse {}", q.stage_mse[0]);
    }

    #[test]
    fn more_stages_never_increase_training_mse() {
        let mut rng = substream(6, "kmeans", &[100]);
        for trial in 0..10u64 {
            let frames = Tensor::<f64>::randn(&[120, 4], 1.0, &mut rng);
            let cfg = QuantizerConfig {
                m: 5,
                k: 8,
                seed: trial,
                kmeans_iters: 10,
                ..Default::default()
            };
            let q = train_codebooks(&frames, &cfg).unwrap();
            for w in q.stage_mse.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", q.stage_mse);
            }
        }
    }

    #[test]
    fn truncation_mse_non_increasing_in_m_use() {
        let mut rng = substream(7, "kmeans", &[101]);
        let frames = Tensor::<f64>::randn(&[80, 3], 1.0, &mut rng);
        let cfg = QuantizerConfig {
            m: 4,
            k: 4,
            seed: 3,
            kmeans_iters: 10,
            ..Default::default()
        };
        let q = train_codebooks(&frames, &cfg).unwrap();
        let z = latent(Tensor::<f64>::randn(&[16, 3], 1.0, &mut rng));
        let (codes, _) = quantize(&z, &q, 1).unwrap();
        let mut prev = f64::INFINITY;
        for m_use in 1..=4 {
            let rec = dequantize(&codes, &q, m_use, 1.0).unwrap();
            let mut mse = 0.0;
            for (a, b) in rec.data.as_slice().iter().zip(z.data.as_slice()) {
                mse += (a - b) * (a - b);
            }
            assert!(mse <= prev + 1e-12, "m_use {m_use}: {mse} > {prev}");
            prev = mse;
        }
    }

    #[test]
    fn beam_matches_exhaustive_and_dominates_greedy() {
        let mut rng = substream(8, "kmeans", &[102]);
        for _ in 0..5 {
            let q = toy_model(vec![
                Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng),
                Tensor::<f64>::randn(&[4, 2], 0.5, &mut rng),
            ]);
            let z = latent(Tensor::<f64>::randn(&[6, 2], 1.0, &mut rng));
            let (greedy_codes, greedy_zq) = quantize(&z, &q, 1).unwrap();
            let (beam_codes, beam_zq) = quantize(&z, &q, 16).unwrap();
            // exhaustive oracle
            for f in 0..z.frames() {
                let target = z.data.row(f);
                let mut best_err = f64::INFINITY;
                let mut best = (0u32, 0u32);
                for a in 0..4u32 {
                    for b in 0..4u32 {
                        let mut err = 0.0;
                        for j in 0..2 {
                            let r = q.codebooks[0].at2(a as usize, j)
                                + q.codebooks[1].at2(b as usize, j);
                            err += (target[j] - r) * (target[j] - r);
                        }
                        if err < best_err {
                            best_err = err;
                            best = (a, b);
                        }
                    }
                }
                assert_eq!((beam_codes.code(f, 0), beam_codes.code(f, 1)), best);
                let greedy_err: f64 = (0..2)
                    .map(|j| {
                        let r = q.codebooks[0].at2(greedy_codes.code(f, 0) as usize, j)
                            + q.codebooks[1].at2(greedy_codes.code(f, 1) as usize, j);
                        (target[j] - r) * (target[j] - r)
                    })
                    .sum();
                assert!(greedy_err >= best_err - 1e-12);
            }
            let g_mse: f64 = greedy_zq
                .data
                .as_slice()
                .iter()
                .zip(z.data.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let b_mse: f64 = beam_zq
                .data
                .as_slice()
                .iter()
                .zip(z.data.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(b_mse <= g_mse + 1e-12);
        }
    }

    #[test]
    fn k_equal_one_reconstructs_stage_means() {
        let frames =
            Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cfg = QuantizerConfig {
            m: 2,
            k: 1,
            seed: 1,
            kmeans_iters: 5,
            ..Default::default()
        };
        let q = train_codebooks(&frames, &cfg).unwrap();
        let z = latent(frames.clone());
        let (codes, zq) = quantize(&z, &q, 1).unwrap();
        assert!(codes.codes.iter().all(|&c| c == 0));
        for &v in zq.data.as_slice() {
            assert!((v - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn bitrate_reproduces_published_rows() {
        let r = bitrate(12, 1024, Ratio::new(100, 9)).unwrap();
        assert_eq!(r, Ratio::from_integer(1320));
        let r = bitrate(25, 4096, Ratio::from_integer(1)).unwrap();
        assert_eq!(r, Ratio::from_integer(300));
        let r = bitrate(8, 4096, Ratio::from_integer(1)).unwrap();
        assert_eq!(r, Ratio::from_integer(96));
    }

    #[test]
    fn non_power_of_two_codebook_rejected() {
        assert!(bitrate(8, 1000, Ratio::from_integer(1)).is_err());
    }

    #[test]
    fn compression_ratio_reproduces_published_rows() {
        assert_eq!(
            compression_ratio(48000, 64, Ratio::from_integer(25)).unwrap(),
            Ratio::from_integer(30)
        );
        assert_eq!(
            compression_ratio(48000, 64, Ratio::new(100, 9)).unwrap(),
            Ratio::new(135, 2) // 67.5
        );
        assert_eq!(
            compression_ratio(48000, 64, Ratio::from_integer(5)).unwrap(),
            Ratio::from_integer(150)
        );
        assert_eq!(
            compression_ratio(48000, 64, Ratio::from_integer(1)).unwrap(),
            Ratio::from_integer(750)
        );
        assert_eq!(
            compression_ratio(48000, 128, Ratio::from_integer(100)).unwrap(),
            Ratio::new(15, 4) // 3.75
        );
    }

    #[test]
    fn finetune_stage_selection() {
        assert_eq!(select_finetune_m(10), 10);
        assert_eq!(select_finetune_m(12), 8);
        assert_eq!(select_finetune_m(20), 5);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = substream(9, "kmeans", &[103]);
        let frames = Tensor::<f64>::randn(&[60, 3], 1.0, &mut rng);
        let cfg = QuantizerConfig {
            m: 3,
            k: 4,
            seed: 11,
            kmeans_iters: 8,
            ..Default::default()
        };
        let a = train_codebooks(&frames, &cfg).unwrap();
        let b = train_codebooks(&frames, &cfg).unwrap();
        for (x, y) in a.codebooks.iter().zip(&b.codebooks) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }

    #[test]
    fn quantizer_checkpoint_round_trip() {
        let mut rng = substream(10, "kmeans", &[104]);
        let frames = Tensor::<f64>::randn(&[64, 3], 1.0, &mut rng);
        let cfg = QuantizerConfig {
            m: 2,
            k: 4,
            seed: 2,
            kmeans_iters: 5,
            adapters: true,
            adapter_steps: 10,
            ..Default::default()
        };
        let q = train_codebooks(&frames, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        save_quantizer(&q, &path).unwrap();
        let back = load_quantizer(&path).unwrap();
        let z = latent(Tensor::<f64>::randn(&[8, 3], 1.0, &mut rng));
        let (c1, zq1) = quantize(&z, &q, 1).unwrap();
        let (c2, zq2) = quantize(&z, &back, 1).unwrap();
        assert_eq!(c1, c2);
        // checkpoint stores f32; reconstructions agree to that precision
        for (a, b) in zq1.data.as_slice().iter().zip(zq2.data.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn adapters_never_hurt_refinement_guarantee() {
        let mut rng = substream(11, "kmeans", &[105]);
        let frames = Tensor::<f64>::randn(&[100, 3], 1.0, &mut rng);
        let cfg = QuantizerConfig {
            m: 4,
            k: 4,
            seed: 4,
            kmeans_iters: 8,
            adapters: true,
            adapter_steps: 30,
            ..Default::default()
        };
        let q = train_codebooks(&frames, &cfg).unwrap();
        for w in q.stage_mse.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", q.stage_mse);
        }
    }
}
