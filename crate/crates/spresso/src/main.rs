use clap::{Parser, Subcommand};
use spresso::config::RunConfig;
use spresso::error::{Error, Result};
use spresso::session::{
    decode_file, encode_file, gen_corpus, run_eval, run_train, selftest, TrainStage,
};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

/// Desk-scale diffusion-autoencoder audio codec.
#[derive(Parser)]
#[command(name = "spresso", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training corpus of WAV clips plus a manifest.
    GenCorpus {
        /// Output directory for the clips and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Number of clips to synthesize.
        #[arg(long, default_value_t = 512)]
        clips: usize,
        /// Duration of each clip in seconds.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        /// Corpus seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Write a fully populated default configuration file.
    InitConfig {
        /// Where to write the TOML configuration.
        #[arg(long, default_value = "spresso.toml")]
        out: PathBuf,
    },
    /// Run one training stage (1 = joint encoder/decoder, q = quantizer,
    /// 3 = quantized finetuning).
    Train {
        /// Stage to run: 1, q, or 3.
        #[arg(long)]
        stage: String,
        /// Configuration file.
        #[arg(long, default_value = "spresso.toml")]
        config: PathBuf,
        /// Corpus directory (from gen-corpus).
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory for checkpoints and loss curves.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the existing checkpoint for this stage.
        #[arg(long)]
        resume: bool,
    },
    /// Compress a WAV file to an .spz stream.
    Encode {
        #[arg(long, default_value = "spresso.toml")]
        config: PathBuf,
        /// Run directory holding the trained checkpoints.
        #[arg(long)]
        run: PathBuf,
        /// Input WAV file.
        input: PathBuf,
        /// Output .spz file.
        output: PathBuf,
        /// Beam width for quantizer search.
        #[arg(long, default_value_t = 1)]
        beam: usize,
    },
    /// Decompress an .spz stream to a WAV file.
    Decode {
        #[arg(long, default_value = "spresso.toml")]
        config: PathBuf,
        /// Run directory holding the trained checkpoints.
        #[arg(long)]
        run: PathBuf,
        /// Input .spz file.
        input: PathBuf,
        /// Output WAV file.
        output: PathBuf,
        /// Number of sampler steps.
        #[arg(long, default_value_t = 64)]
        steps: usize,
        /// Sampler noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Decode using only the first m quantizer stages.
        #[arg(long)]
        m_use: Option<usize>,
        /// Optional class conditioning id.
        #[arg(long)]
        class: Option<usize>,
        /// Classifier-free guidance weight (1 = plain conditional).
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
    },
    /// Reconstruct held-out clips and report quality metrics.
    Eval {
        #[arg(long, default_value = "spresso.toml")]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Stage counts to sweep, comma separated (default: the full m).
        #[arg(long)]
        m_use: Option<String>,
        /// Number of sampler steps.
        #[arg(long, default_value_t = 64)]
        steps: usize,
        /// Maximum number of clips to evaluate.
        #[arg(long, default_value_t = 16)]
        clips: usize,
        /// Sampler noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Classifier-free guidance weight (1 = plain conditional).
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        /// Optional TSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run fast internal consistency checks.
    Selftest,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            out,
            clips,
            duration,
            seed,
            force,
        } => {
            let n = gen_corpus(&out, clips, duration, seed, force)?;
            println!("wrote {n} clips to {}", out.display());
            Ok(())
        }
        Command::InitConfig { out } => {
            let cfg = RunConfig::default();
            cfg.save(&out)?;
            println!("wrote default configuration to {}", out.display());
            Ok(())
        }
        Command::Train {
            stage,
            config,
            corpus,
            out,
            resume,
        } => {
            let stage = TrainStage::from_str(&stage)?;
            let cfg = RunConfig::load(&config)?;
            run_train(&cfg, &corpus, &out, stage, resume)
        }
        Command::Encode {
            config,
            run,
            input,
            output,
            beam,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = encode_file(&cfg, &run, &input, &output, beam)?;
            println!(
                "encoded {} latent frames into {} bytes ({} bits/s)",
                report.frames, report.payload_bytes, report.bits_per_second
            );
            Ok(())
        }
        Command::Decode {
            config,
            run,
            input,
            output,
            steps,
            seed,
            m_use,
            class,
            guidance,
        } => {
            let cfg = RunConfig::load(&config)?;
            decode_file(&cfg, &run, &input, &output, steps, seed, m_use, class, guidance)?;
            println!("decoded to {}", output.display());
            Ok(())
        }
        Command::Eval {
            config,
            run,
            corpus,
            m_use,
            steps,
            clips,
            seed,
            guidance,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let m_uses: Vec<usize> = match m_use {
                Some(spec) => spec
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::invalid(format!("bad m_use entry {s:?}")))
                    })
                    .collect::<Result<_>>()?,
                None => vec![cfg.quantizer.m],
            };
            run_eval(
                &cfg,
                &run,
                &corpus,
                &m_uses,
                steps,
                clips,
                seed,
                guidance,
                out.as_deref(),
            )?;
            Ok(())
        }
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
