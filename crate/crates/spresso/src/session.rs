//! End-to-end orchestration: corpus generation, the three training stages,
//! file encode/decode, evaluation, and the fast self-test.

use crate::bitstream::{read_spz, write_spz, SpzHeader};
use crate::config::RunConfig;
use crate::decoder::denoiser::{build_conditioning, Denoiser};
use crate::encoder::LatentEncoder;
use crate::error::{Error, Result};
use crate::frontend::transform::{
    fit_channel_scale, frontend_decode, frontend_encode, FrontendConfig,
};
use crate::frontend::{synth_clip, wav_read, wav_write, ClipKind, Waveform};
use crate::metrics::{
    cosine, frechet_distance, kernel_distance, si_sdr, EmbeddingStats, SurrogateEmbedder,
};
use crate::nn::checkpoint::{pack_params, unpack_params, Checkpoint};
use crate::nn::tensor::Tensor;
use crate::quantizer::{
    bitrate, load_quantizer, quantize, save_quantizer, select_finetune_m, train_codebooks,
    QuantizerModel,
};
use crate::rng::substream;
use crate::sampler::{
    build_schedule, heun_sample, reconstruct, uncond_branch, GuidedDenoiser, RHO, SIGMA_MAX,
    SIGMA_MIN,
};
use crate::train::{stage1_step, stage3_step, ClipBatchItem, Models, Stage};
use num_rational::Ratio;
use rand::seq::index::sample as index_sample;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Well-known artifact file names inside a run directory.
pub struct ArtifactPaths {
    pub dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: &Path) -> Self {
        ArtifactPaths {
            dir: dir.to_path_buf(),
        }
    }
    pub fn stage1_ckpt(&self) -> PathBuf {
        self.dir.join("stage1.ckpt")
    }
    pub fn quantizer_ckpt(&self) -> PathBuf {
        self.dir.join("quantizer.ckpt")
    }
    pub fn stage3_ckpt(&self) -> PathBuf {
        self.dir.join("stage3.ckpt")
    }
    pub fn loss_curve(&self, stage: TrainStage) -> PathBuf {
        match stage {
            TrainStage::Stage1 => self.dir.join("stage1.loss.tsv"),
            TrainStage::Quantizer => self.dir.join("quantizer.loss.tsv"),
            TrainStage::Stage3 => self.dir.join("stage3.loss.tsv"),
        }
    }

    /// Newest trained model checkpoint: stage 3 if present, else stage 1.
    pub fn model_ckpt(&self) -> Result<PathBuf> {
        let s3 = self.stage3_ckpt();
        if s3.exists() {
            return Ok(s3);
        }
        let s1 = self.stage1_ckpt();
        if s1.exists() {
            return Ok(s1);
        }
        Err(Error::MissingCheckpoint(format!(
            "no model checkpoint in {}; run `spresso train --stage 1` first",
            self.dir.display()
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Stage1,
    Quantizer,
    Stage3,
}

impl FromStr for TrainStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(TrainStage::Stage1),
            "q" | "2" => Ok(TrainStage::Quantizer),
            "3" => Ok(TrainStage::Stage3),
            other => Err(Error::invalid(format!(
                "unknown stage {other:?}; expected 1, q, or 3"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// corpus

#[derive(Debug)]
pub struct CorpusEntry {
    pub id: u64,
    pub file: String,
    pub kind: ClipKind,
}

/// Generate `clips` synthetic WAV files plus a manifest into `dir`.
pub fn gen_corpus(dir: &Path, clips: usize, duration_s: f64, seed: u64, force: bool) -> Result<usize> {
    if clips == 0 {
        return Err(Error::invalid("need at least one clip"));
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    if manifest_path.exists() && !force {
        return Err(Error::invalid(format!(
            "{} already exists (use --force to overwrite)",
            manifest_path.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("clip_id\tfile\tclass_id\tkind\n");
    for i in 0..clips {
        let kind = ClipKind::ALL[i % ClipKind::ALL.len()];
        let w = synth_clip(kind, duration_s, seed.wrapping_add(i as u64))?;
        let file = format!("clip_{i:05}.wav");
        wav_write(&dir.join(&file), &w)?;
        writeln!(manifest, "{i}\t{file}\t{}\t{}", kind.id(), kind.name()).unwrap();
    }
    std::fs::write(&manifest_path, manifest)?;
    Ok(clips)
}

/// Read the manifest and all referenced clips.
pub fn load_corpus(dir: &Path) -> Result<Vec<(CorpusEntry, Waveform)>> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path).map_err(|_| {
        Error::invalid(format!(
            "no corpus manifest at {}; run `spresso gen-corpus` first",
            manifest_path.display()
        ))
    })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {} has {} columns, expected 4",
                lineno + 1,
                cols.len()
            )));
        }
        let id: u64 = cols[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad clip id {:?}", cols[0])))?;
        let kind = ClipKind::from_str(cols[3])?;
        let w = wav_read(&dir.join(cols[1]))?;
        out.push((
            CorpusEntry {
                id,
                file: cols[1].to_string(),
                kind,
            },
            w,
        ));
    }
    if out.is_empty() {
        return Err(Error::invalid("corpus manifest lists no clips"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// model construction and checkpointing

pub fn build_models(cfg: &RunConfig) -> Result<Models<f32>> {
    let mut enc_rng = substream(cfg.seed, "init", &[0]);
    let encoder = LatentEncoder::new(cfg.encoder_config(), cfg.channels(), &mut enc_rng)?;
    let mut dec_rng = substream(cfg.seed, "init", &[1]);
    let mut denoiser = Denoiser::new(cfg.denoiser_config(), &mut dec_rng)?;
    let mut lora_rng = substream(cfg.seed, "init", &[2]);
    denoiser.attach_lora(cfg.decoder.lora_rank, cfg.decoder.lora_alpha, &mut lora_rng);
    Ok(Models { encoder, denoiser })
}

pub fn save_models(
    models: &mut Models<f32>,
    channel_scale: &[f64],
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.insert_scalar("step", step as f64);
    ck.insert(
        "frontend.channel_scale",
        &Tensor::from_vec(&[channel_scale.len()], channel_scale.to_vec())?,
    );
    pack_params(&mut ck, models, "model");
    ck.save(path)
}

pub fn load_models(cfg: &RunConfig, path: &Path) -> Result<(Models<f32>, Vec<f64>, u64)> {
    let ck = Checkpoint::load(path)?;
    let mut models = build_models(cfg)?;
    unpack_params(&ck, &mut models, "model")?;
    let scale = ck.get::<f64>("frontend.channel_scale")?.as_slice().to_vec();
    if scale.len() != cfg.channels() {
        return Err(Error::Format(format!(
            "checkpoint channel scale has {} entries, config expects {}",
            scale.len(),
            cfg.channels()
        )));
    }
    let step = ck.get_scalar("step")? as u64;
    Ok((models, scale, step))
}

fn frontend_with_scale(cfg: &RunConfig, scale: Vec<f64>) -> FrontendConfig {
    FrontendConfig {
        channel_scale: scale,
        ..cfg.frontend_config()
    }
}

/// Convert one clip to its f32 token grid [T, C].
fn clip_tokens(w: &Waveform, fcfg: &FrontendConfig) -> Result<Tensor<f32>> {
    let x0 = frontend_encode(w, fcfg)?;
    Ok(x0.data.transpose2().cast::<f32>())
}

fn check_sample_rate(cfg: &RunConfig, w: &Waveform, what: &str) -> Result<()> {
    if w.sample_rate != cfg.frontend.sample_rate {
        return Err(Error::Format(format!(
            "{what} has sample rate {}, config expects {}",
            w.sample_rate, cfg.frontend.sample_rate
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// training

fn append_loss_line(path: &Path, step: u64, weighted: f64, mse: f64) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(f, "{step}\t{weighted}\t{mse}")?;
    Ok(())
}

fn make_batch(
    items: &[ClipBatchItem<f32>],
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Vec<ClipBatchItem<f32>> {
    let mut rng = substream(seed, "batch", &[step]);
    let take = batch_size.min(items.len());
    index_sample(&mut rng, items.len(), take)
        .iter()
        .map(|i| ClipBatchItem {
            clip_id: items[i].clip_id,
            tokens: items[i].tokens.clone(),
            class_id: items[i].class_id,
        })
        .collect()
}

fn corpus_items(
    corpus: &[(CorpusEntry, Waveform)],
    fcfg: &FrontendConfig,
) -> Result<Vec<ClipBatchItem<f32>>> {
    corpus
        .iter()
        .map(|(e, w)| {
            Ok(ClipBatchItem {
                clip_id: e.id,
                tokens: clip_tokens(w, fcfg)?,
                class_id: e.kind.id(),
            })
        })
        .collect()
}

pub fn run_train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out_dir: &Path,
    stage: TrainStage,
    resume: bool,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let art = ArtifactPaths::new(out_dir);
    let corpus = load_corpus(corpus_dir)?;
    for (e, w) in &corpus {
        check_sample_rate(cfg, w, &e.file)?;
    }
    match stage {
        TrainStage::Stage1 => run_stage1(cfg, &corpus, &art, resume),
        TrainStage::Quantizer => run_quantizer_stage(cfg, &corpus, &art),
        TrainStage::Stage3 => run_stage3(cfg, &corpus, &art, resume),
    }
}

fn run_stage1(
    cfg: &RunConfig,
    corpus: &[(CorpusEntry, Waveform)],
    art: &ArtifactPaths,
    resume: bool,
) -> Result<()> {
    let (mut models, scale, start_step) = if resume {
        load_models(cfg, &art.stage1_ckpt())?
    } else {
        let waves: Vec<Waveform> = corpus.iter().map(|(_, w)| w.clone()).collect();
        let scale = fit_channel_scale(&waves, &cfg.frontend_config(), cfg.edm.sigma_data)?
            .into_iter()
            // checkpoints store f32, so quantize now to keep resumed runs
            // bit-identical to uninterrupted ones
            .map(|s| s as f32 as f64)
            .collect();
        (build_models(cfg)?, scale, 0)
    };
    let fcfg = frontend_with_scale(cfg, scale.clone());
    let items = corpus_items(corpus, &fcfg)?;
    let total = (cfg.train.pretrain_steps + cfg.train.stage1_steps) as u64;
    if start_step >= total {
        log::info!("stage 1 already complete at step {start_step}");
        return Ok(());
    }
    let tcfg = cfg.train_config(total as usize);
    let loss_path = art.loss_curve(TrainStage::Stage1);
    if !resume && loss_path.exists() {
        std::fs::remove_file(&loss_path)?;
    }
    for step in start_step + 1..=total {
        let phase = if step <= cfg.train.pretrain_steps as u64 {
            Stage::Pretrain
        } else {
            Stage::One
        };
        let batch = make_batch(&items, cfg.train.batch_size, cfg.seed, step);
        let rec = stage1_step(&mut models, &batch, &tcfg, step, phase)?;
        append_loss_line(&loss_path, step, rec.weighted, rec.mse)?;
        if step % 50 == 0 || step == total {
            log::info!(
                "stage 1 step {step}/{total} ({:?}): loss {:.5}, mse {:.5}",
                phase,
                rec.weighted,
                rec.mse
            );
        }
        if step % 500 == 0 {
            save_models(&mut models, &scale, step, &art.stage1_ckpt())?;
        }
    }
    save_models(&mut models, &scale, total, &art.stage1_ckpt())?;
    Ok(())
}

fn require_stage1(cfg: &RunConfig, art: &ArtifactPaths) -> Result<(Models<f32>, Vec<f64>, u64)> {
    if !art.stage1_ckpt().exists() {
        return Err(Error::MissingCheckpoint(format!(
            "stage 1 checkpoint {} not found; run `spresso train --stage 1` first",
            art.stage1_ckpt().display()
        )));
    }
    load_models(cfg, &art.stage1_ckpt())
}

fn require_quantizer(art: &ArtifactPaths) -> Result<QuantizerModel> {
    if !art.quantizer_ckpt().exists() {
        return Err(Error::MissingCheckpoint(format!(
            "quantizer checkpoint {} not found; run `spresso train --stage q` first",
            art.quantizer_ckpt().display()
        )));
    }
    load_quantizer(&art.quantizer_ckpt())
}

fn run_quantizer_stage(
    cfg: &RunConfig,
    corpus: &[(CorpusEntry, Waveform)],
    art: &ArtifactPaths,
) -> Result<()> {
    let (models, scale, _) = require_stage1(cfg, art)?;
    let fcfg = frontend_with_scale(cfg, scale);
    let mut rows = Vec::new();
    let mut n = 0usize;
    for (_, w) in corpus {
        let tokens = clip_tokens(w, &fcfg)?;
        let (z, _) = models.encoder.forward(&tokens, cfg.token_rate())?;
        let zf = z.cast::<f64>();
        for f in 0..zf.frames() {
            rows.extend_from_slice(zf.data.row(f));
            n += 1;
        }
    }
    let frames = Tensor::from_vec(&[n, cfg.latent_dim()], rows)?;
    log::info!(
        "training quantizer on {n} latent frames (m = {}, k = {})",
        cfg.quantizer.m,
        cfg.quantizer.k
    );
    let q = train_codebooks(&frames, &cfg.quantizer_config())?;
    let mut curve = String::new();
    for (i, mse) in q.stage_mse.iter().enumerate() {
        writeln!(curve, "{}\t{mse}", i + 1).unwrap();
    }
    std::fs::write(art.loss_curve(TrainStage::Quantizer), curve)?;
    save_quantizer(&q, &art.quantizer_ckpt())?;
    log::info!(
        "quantizer trained; final residual mse {:.6}",
        q.stage_mse.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run_stage3(
    cfg: &RunConfig,
    corpus: &[(CorpusEntry, Waveform)],
    art: &ArtifactPaths,
    resume: bool,
) -> Result<()> {
    let q = require_quantizer(art)?;
    let (mut models, scale, start_step) = if resume && art.stage3_ckpt().exists() {
        load_models(cfg, &art.stage3_ckpt())?
    } else {
        require_stage1(cfg, art)?
    };
    let stage1_total = (cfg.train.pretrain_steps + cfg.train.stage1_steps) as u64;
    let start_step = start_step.max(stage1_total);
    let total = stage1_total + cfg.train.stage3_steps as u64;
    if start_step >= total {
        log::info!("stage 3 already complete at step {start_step}");
        return Ok(());
    }
    let fcfg = frontend_with_scale(cfg, scale.clone());
    let items = corpus_items(corpus, &fcfg)?;
    let m_use = select_finetune_m(cfg.quantizer.k.trailing_zeros()).min(cfg.quantizer.m);
    log::info!("stage 3 finetunes on the first {m_use} quantizer stages");
    let tcfg = cfg.train_config(cfg.train.stage3_steps);
    let loss_path = art.loss_curve(TrainStage::Stage3);
    if start_step == stage1_total && loss_path.exists() {
        std::fs::remove_file(&loss_path)?;
    }
    for step in start_step + 1..=total {
        let batch = make_batch(&items, cfg.train.batch_size, cfg.seed, step);
        let rec = stage3_step(&mut models, &q, m_use, &batch, &tcfg, step)?;
        append_loss_line(&loss_path, step, rec.weighted, rec.mse)?;
        if step % 50 == 0 || step == total {
            log::info!(
                "stage 3 step {}/{} : loss {:.5}, mse {:.5}",
                step - stage1_total,
                total - stage1_total,
                rec.weighted,
                rec.mse
            );
        }
        if step % 500 == 0 {
            save_models(&mut models, &scale, step, &art.stage3_ckpt())?;
        }
    }
    save_models(&mut models, &scale, total, &art.stage3_ckpt())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// encode / decode

pub struct EncodeReport {
    pub frames: usize,
    pub payload_bytes: usize,
    pub bits_per_second: Ratio<u64>,
}

pub fn encode_file(
    cfg: &RunConfig,
    run_dir: &Path,
    input: &Path,
    output: &Path,
    beam: usize,
) -> Result<EncodeReport> {
    let art = ArtifactPaths::new(run_dir);
    let (models, scale, _) = load_models(cfg, &art.model_ckpt()?)?;
    let q = require_quantizer(&art)?;
    let w = wav_read(input)?;
    check_sample_rate(cfg, &w, &input.display().to_string())?;
    let fcfg = frontend_with_scale(cfg, scale);
    let x0 = frontend_encode(&w, &fcfg)?;
    let frames = x0.frames();
    let tokens = x0.data.transpose2().cast::<f32>();
    let (z, _) = models.encoder.forward(&tokens, x0.latent_rate)?;
    let zf = z.cast::<f64>();
    let (codes, _) = quantize(&zf, &q, beam)?;
    let header = SpzHeader {
        sample_rate: cfg.frontend.sample_rate,
        hop: cfg.frontend.hop as u16,
        window_len: cfg.frontend.window_len as u16,
        channels: cfg.channels() as u16,
        c: cfg.encoder.c as u8,
        t: cfg.encoder.t as u16,
        d: cfg.latent_dim() as u16,
        m: cfg.quantizer.m as u8,
        log2k: cfg.quantizer.k.trailing_zeros() as u8,
        num_frames: codes.frames as u32,
        seed: cfg.seed,
    };
    let bytes = write_spz(&header, &codes)?;
    std::fs::write(output, &bytes)?;
    let rate = bitrate(
        cfg.quantizer.m as u64,
        cfg.quantizer.k as u64,
        Ratio::new(
            cfg.frontend.sample_rate as u64,
            (cfg.frontend.hop * cfg.encoder.t) as u64,
        ),
    )?;
    Ok(EncodeReport {
        frames,
        payload_bytes: bytes.len(),
        bits_per_second: rate,
    })
}

pub fn decode_file(
    cfg: &RunConfig,
    run_dir: &Path,
    input: &Path,
    output: &Path,
    steps: usize,
    seed: u64,
    m_use: Option<usize>,
    class_id: Option<usize>,
    guidance: f64,
) -> Result<()> {
    let art = ArtifactPaths::new(run_dir);
    let (models, scale, _) = load_models(cfg, &art.model_ckpt()?)?;
    let q = require_quantizer(&art)?;
    let data = std::fs::read(input)?;
    let (header, codes) = read_spz(&data)?;
    if header.sample_rate != cfg.frontend.sample_rate
        || header.hop as usize != cfg.frontend.hop
        || header.window_len as usize != cfg.frontend.window_len
    {
        return Err(Error::Format(format!(
            "stream geometry ({} Hz, hop {}) does not match config",
            header.sample_rate, header.hop
        )));
    }
    let m_use = m_use.unwrap_or(header.m as usize);
    let latent_frames = codes.frames;
    let frame_rate = cfg.frame_rate();
    let zq = dequantize_f32(&codes, &q, m_use, frame_rate)?;
    // token frames: the latent grid covers t frames each
    let frames = latent_frames * header.t as usize;
    let cond = build_conditioning(&zq, header.t as usize, frames, class_id)?;
    let schedule = build_schedule(steps, SIGMA_MIN, SIGMA_MAX, RHO)?;
    let uncond = uncond_branch(&cond);
    let x0_hat = heun_sample(
        &GuidedDenoiser {
            model: &models.denoiser,
            cond: &cond,
            uncond: &uncond,
            weight: guidance,
        },
        frames,
        cfg.channels(),
        &schedule,
        seed,
    )?;
    let fcfg = frontend_with_scale(cfg, scale);
    let latent = crate::frontend::LatentTensor {
        data: x0_hat.cast::<f64>().transpose2(),
        latent_rate: cfg.token_rate(),
    };
    let w = frontend_decode(&latent, &fcfg)?;
    wav_write(output, &w)?;
    Ok(())
}

fn dequantize_f32(
    codes: &crate::quantizer::CodeGrid,
    q: &QuantizerModel,
    m_use: usize,
    frame_rate: f64,
) -> Result<crate::encoder::CompressedLatent<f32>> {
    Ok(crate::quantizer::dequantize(codes, q, m_use, frame_rate)?.cast::<f32>())
}

// ---------------------------------------------------------------------------
// evaluation

pub struct EvalRow {
    pub m_use: usize,
    pub bits_per_second: f64,
    pub si_sdr_mean: f64,
    pub cosine_mean: f64,
    pub frechet: f64,
    pub kernel: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn run_eval(
    cfg: &RunConfig,
    run_dir: &Path,
    corpus_dir: &Path,
    m_uses: &[usize],
    steps: usize,
    max_clips: usize,
    seed: u64,
    guidance: f64,
    out_path: Option<&Path>,
) -> Result<Vec<EvalRow>> {
    let art = ArtifactPaths::new(run_dir);
    let (models, scale, _) = load_models(cfg, &art.model_ckpt()?)?;
    let q = require_quantizer(&art)?;
    let corpus = load_corpus(corpus_dir)?;
    let clips: Vec<&(CorpusEntry, Waveform)> = corpus.iter().take(max_clips.max(2)).collect();
    let fcfg = frontend_with_scale(cfg, scale);
    let embedder = SurrogateEmbedder::new();
    let ref_embeds: Vec<Vec<f64>> = clips
        .iter()
        .map(|(_, w)| embedder.embed(w))
        .collect::<Result<_>>()?;
    let ref_stats = EmbeddingStats::from_rows(&ref_embeds)?;

    let mut rows = Vec::new();
    for &m_use in m_uses {
        let mut sdrs = Vec::new();
        let mut cosines = Vec::new();
        let mut rec_embeds = Vec::new();
        for (i, (entry, w)) in clips.iter().enumerate() {
            let recon = reconstruct(
                w,
                &fcfg,
                &models.encoder,
                &models.denoiser,
                Some((&q, m_use, cfg.quantizer.beam)),
                steps,
                seed.wrapping_add(i as u64),
                Some(entry.kind.id()),
                guidance,
            )?;
            sdrs.push(si_sdr(w, &recon)?);
            let e = embedder.embed(&recon)?;
            cosines.push(cosine(&ref_embeds[i], &e));
            rec_embeds.push(e);
        }
        let rec_stats = EmbeddingStats::from_rows(&rec_embeds)?;
        let rate = bitrate(
            m_use as u64,
            cfg.quantizer.k as u64,
            Ratio::new(
                cfg.frontend.sample_rate as u64,
                (cfg.frontend.hop * cfg.encoder.t) as u64,
            ),
        )?;
        rows.push(EvalRow {
            m_use,
            bits_per_second: *rate.numer() as f64 / *rate.denom() as f64,
            si_sdr_mean: sdrs.iter().sum::<f64>() / sdrs.len() as f64,
            cosine_mean: cosines.iter().sum::<f64>() / cosines.len() as f64,
            frechet: frechet_distance(&ref_stats, &rec_stats)?,
            kernel: kernel_distance(&ref_embeds, &rec_embeds)?,
        });
    }
    let mut tsv = String::from("m_use\tbits_per_second\tsi_sdr_mean\tcosine_mean\tfrechet\tkernel\n");
    for r in &rows {
        writeln!(
            tsv,
            "{}\t{:.3}\t{:.4}\t{:.4}\t{:.6}\t{:.6}",
            r.m_use, r.bits_per_second, r.si_sdr_mean, r.cosine_mean, r.frechet, r.kernel
        )
        .unwrap();
    }
    if let Some(p) = out_path {
        std::fs::write(p, &tsv)?;
    }
    print!("{tsv}");
    Ok(rows)
}

// ---------------------------------------------------------------------------
// self-test

/// Fast internal consistency checks; prints one line per check.
pub fn selftest() -> Result<()> {
    use crate::decoder::edm::{loss_weight, precondition_coeffs, EdmParams};

    let check = |name: &str, ok: bool| -> Result<()> {
        println!("selftest: {name} ... {}", if ok { "ok" } else { "FAILED" });
        if ok {
            Ok(())
        } else {
            Err(Error::Numeric(format!("selftest failed: {name}")))
        }
    };

    // frontend perfect reconstruction
    let cfg = RunConfig::default();
    let fcfg = cfg.frontend_config();
    let w = synth_clip(ClipKind::Mixture, 1.0, 7)?;
    let x0 = frontend_encode(&w, &fcfg)?;
    let back = frontend_decode(&x0, &fcfg)?;
    check("frontend round trip >= 60 dB", si_sdr(&w, &back)? >= 60.0)?;

    // preconditioning identity
    let edm = EdmParams::default();
    let mut ok = true;
    for i in 0..40 {
        let sigma = 1e-3 * (1e6f64).powf(i as f64 / 39.0);
        let (_, c_out, _, _) = precondition_coeffs(sigma, &edm)?;
        ok &= (loss_weight(sigma, &edm)? * c_out * c_out - 1.0).abs() < 1e-9;
    }
    check("loss weight cancels c_out^2", ok)?;

    // schedule endpoints
    let s = build_schedule(64, SIGMA_MIN, SIGMA_MAX, RHO)?;
    check(
        "karras schedule endpoints",
        s.sigmas[0] == SIGMA_MAX
            && (s.sigmas[63] - SIGMA_MIN).abs() < 1e-12
            && s.sigmas[64] == 0.0,
    )?;

    // solver order on the analytic oracle
    let oracle = crate::sampler::GaussianOracle { sigma_data: 0.5 };
    let err_for = |n: usize| -> Result<f64> {
        let s = build_schedule(n, SIGMA_MIN, SIGMA_MAX, RHO)?;
        let x = heun_sample::<f64>(&oracle, 8, 4, &s, 5)?;
        let mut rng = substream(5, "sampler", &[]);
        let e = Tensor::<f64>::randn(&[8, 4], s.sigmas[0], &mut rng);
        let g = 0.5 / (0.25 + s.sigmas[0] * s.sigmas[0]).sqrt();
        let mut exact = e;
        exact.scale(g);
        let mut diff = x;
        diff.axpy(-1.0, &exact);
        Ok(diff.sq_norm().sqrt())
    };
    check(
        "heun solver is second order",
        err_for(8)? / err_for(16)? >= 3.0,
    )?;

    // bitstream round trip
    use rand::Rng as _;
    let mut rng = substream(0, "corpus", &[4242]);
    let mut ok = true;
    for _ in 0..100 {
        let m = rng.gen_range(1..=16usize);
        let log2k = rng.gen_range(1..=12u8);
        let frames = rng.gen_range(1..=64usize);
        let codes: Vec<u32> = (0..m * frames)
            .map(|_| rng.gen_range(0..(1u32 << log2k)))
            .collect();
        let grid = crate::quantizer::CodeGrid {
            m,
            k: 1 << log2k,
            frames,
            codes: codes.clone(),
        };
        let packed = crate::bitstream::pack_codes(&grid, log2k)?;
        ok &= crate::bitstream::unpack_codes(&packed, m, log2k, frames)?.codes == codes;
    }
    check("bitstream round trip", ok)?;

    // quantizer refinement is monotone
    let mut rng = substream(0, "corpus", &[4243]);
    let frames = Tensor::<f64>::randn(&[256, 8], 1.0, &mut rng);
    let q = train_codebooks(
        &frames,
        &crate::quantizer::QuantizerConfig {
            m: 6,
            k: 16,
            kmeans_iters: 10,
            seed: 1,
            ..Default::default()
        },
    )?;
    check(
        "quantizer stages refine monotonically",
        q.stage_mse.windows(2).all(|w| w[1] <= w[0] + 1e-12),
    )?;

    println!("selftest: all checks passed");
    Ok(())
}
