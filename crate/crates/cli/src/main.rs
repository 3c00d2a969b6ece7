use clap::{Parser, Subcommand};
use semdac::ablation::{write_grid, Grid};
use semdac::audio_io::{load_wav, write_wav};
use semdac::codec::NeuralCodec;
use semdac::metrics::{eval_corpus, Codec, Passthrough};
use semdac::model::FRAME_RATE;
use semdac::quantization::{bitrate_kbps, shipped_bitrate_presets};
use semdac::training::{train_loop, TrainConfig};
use semdac::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

/// Semantic-aware neural speech codec.
#[derive(Parser)]
#[command(name = "semdac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec and write checkpoints plus a per-step loss log.
    Train {
        /// Run configuration (`key = value` lines); desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of 16 kHz WAV clips (with `<stem>.semf` teacher features unless mocked).
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoints and `loss.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Use seeded stand-in teacher features.
        #[arg(long)]
        mock_teacher: bool,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Compress a WAV file to an `.sdac` stream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Reconstruct a WAV file from an `.sdac` stream.
    Decode {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Score reconstructions of a corpus; `--model passthrough` skips coding.
    Eval {
        #[arg(long)]
        model: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = -24.0, allow_hyphen_values = true)]
        target_lufs: f64,
    },
    /// Print nominal bitrates of every shipped quantizer preset.
    BitrateTable,
    /// Emit one derived config per ablation cell plus a manifest.
    Ablate {
        /// `film` or `semsize`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a full configuration file for a preset.
    PrintConfig {
        /// `desk` or `full`.
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Write the seeded synthetic training corpus.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = semdac::corpus::DESK_CORPUS_CLIPS)]
        clips: usize,
        #[arg(long, default_value_t = semdac::corpus::DESK_CLIP_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_file(p),
        None => Ok(TrainConfig::desk()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, corpus, out, mock_teacher, resume, iterations } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.mock_teacher |= mock_teacher;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let last = train_loop(cfg, &corpus, &out, resume.as_deref())?;
            println!("final checkpoint: {}", last.display());
        }
        Command::Encode { model, input, output } => {
            let codec = NeuralCodec::from_checkpoint(&model)?;
            let clip = load_wav(&input)?;
            let enc = codec.encode(&clip)?;
            std::fs::write(&output, &enc.bytes).map_err(Error::io(&output))?;
            let rate = codec.bitrate(&enc)?;
            println!("frames: {}", enc.header.n_frames);
            println!("nominal bitrate: {} kbps", rate.nominal_kbps);
            println!("actual bitrate: {:.4} kbps ({} payload bits)", rate.actual_kbps, rate.payload_bits);
        }
        Command::Decode { model, input, output } => {
            let codec = NeuralCodec::from_checkpoint(&model)?;
            let bytes = std::fs::read(&input).map_err(Error::io(&input))?;
            let clip = codec.decode(&bytes)?;
            write_wav(&output, &clip)?;
            println!("samples: {}", clip.len());
        }
        Command::Eval { model, corpus, out, target_lufs } => {
            let codec: Box<dyn Codec> =
                if model == "passthrough" { Box::new(Passthrough) } else { Box::new(NeuralCodec::from_checkpoint(&model)?) };
            let report = eval_corpus(codec.as_ref(), &corpus, target_lufs)?;
            report.write_csv(&out)?;
            println!(
                "{} clips ({} skipped): si-snr mean {:.3} dB median {:.3} dB; mel distance mean {:.4} median {:.4}",
                report.reports.len(),
                report.skipped.len(),
                report.si_snr.mean,
                report.si_snr.median,
                report.mel_distance.mean,
                report.mel_distance.median
            );
        }
        Command::BitrateTable => {
            println!("{:<14} {:<22} {:>8}", "family", "quantizers", "kbps");
            for p in shipped_bitrate_presets() {
                println!("{:<14} {:<22} {:>8}", p.family, p.name, bitrate_kbps(&p.sizes, FRAME_RATE)?);
            }
        }
        Command::Ablate { grid, config, out } => {
            let grid: Grid = grid.parse()?;
            let base = load_config(config.as_ref())?;
            let rows = write_grid(grid, &base, &out)?;
            for r in &rows {
                println!("{} -> {} ({} kbps)", r.cell, r.config_path.display(), r.nominal_bitrate_kbps);
            }
        }
        Command::PrintConfig { preset } => {
            let cfg = match preset.as_str() {
                "desk" => TrainConfig::desk(),
                "full" => TrainConfig::full(),
                other => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
            };
            print!("{}", cfg.to_text());
        }
        Command::SynthCorpus { out, clips, samples, seed } => {
            let paths = semdac::corpus::write_synthetic_corpus(&out, clips, samples, seed)?;
            println!("wrote {} clips to {}", paths.len(), out.display());
        }
    }
    Ok(())
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
