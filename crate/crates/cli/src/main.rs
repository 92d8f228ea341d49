mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

// Keeps large activation buffers mapped between synthesis passes.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "hooligan", version, about = "Source-excitation neural vocoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resample, normalize and featurize a directory of WAVs.
    Prepare {
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of per-utterance F0 text files replacing the built-in tracker.
        #[arg(long)]
        f0_import: Option<PathBuf>,
    },
    /// Write a freshly initialised checkpoint for a config.
    Init {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-phase training with periodic checkpoints and metrics.csv.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a feature file to a 16-bit WAV.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time end-to-end synthesis of generated features.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        seconds: f64,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on miniature models.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = ["all", "excitation", "filter", "gan"])]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        flip_sign: bool,
    },
    /// Summarise a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare {
            wav_dir,
            out_dir,
            config,
            f0_import,
        } => commands::prepare(&wav_dir, &out_dir, config.as_deref(), f0_import.as_deref()),
        Command::Init { config, out } => commands::init(config.as_deref(), &out),
        Command::Train {
            manifest,
            config,
            out,
            resume,
        } => commands::train(&manifest, config.as_deref(), &out, resume.as_deref()),
        Command::Synth {
            ckpt,
            features,
            out,
            seed,
        } => commands::synth(&ckpt, &features, &out, seed),
        Command::Bench {
            ckpt,
            seconds,
            threads,
            runs,
            seed,
            json,
        } => commands::bench(&ckpt, seconds, threads, runs, seed, json.as_deref()),
        Command::Gradcheck { module, seed, flip_sign } => commands::gradcheck(&module, seed, flip_sign),
        Command::Inspect { ckpt } => commands::inspect(&ckpt),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
