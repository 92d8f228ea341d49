use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use hooligan::features::dataset::prepare_dataset;
use hooligan::features::manifest::DatasetManifest;
use hooligan::features::synthetic::bench_features;
use hooligan::features::{read_features, save_wav, AudioBuffer};
use hooligan::numcore::gradcheck::CheckOptions;
use hooligan::trainer::checkpoint::fnv1a64;
use hooligan::trainer::gradcheck::{gradcheck as run_gradcheck, parse_selector};
use hooligan::trainer::{self, load_checkpoint, save_checkpoint, Trainer, CHECKPOINT_VERSION};
use hooligan::{Error, Result};

use crate::config::RunConfig;

/// Fixed CPU throughput printed next to measurements for context, samples per second.
const REFERENCE_CPU_SAMPLES_PER_SEC: f64 = 35_000.0;

pub fn prepare(wav_dir: &Path, out_dir: &Path, config: Option<&Path>, f0: Option<&Path>) -> Result<ExitCode> {
    let cfg = RunConfig::load_or_default(config)?;
    let report = prepare_dataset(wav_dir, out_dir, &cfg.feature_config(), f0)?;
    println!(
        "prepared {} utterances; manifest {}",
        report.manifest.len(),
        report.manifest_path.display()
    );
    if report.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for (path, reason) in &report.failures {
        eprintln!("failed: {}: {reason}", path.display());
    }
    eprintln!("{} file(s) could not be prepared", report.failures.len());
    Ok(ExitCode::from(1))
}

pub fn init(config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let cfg = RunConfig::load_or_default(config)?;
    let t = Trainer::new(&cfg.generator, &cfg.train)?;
    save_checkpoint(out, &t.to_checkpoint())?;
    println!(
        "wrote {} ({} generator parameters)",
        out.display(),
        t.generator.num_parameters()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(manifest: &Path, config: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<ExitCode> {
    let cfg = RunConfig::load_or_default(config)?;
    let m = DatasetManifest::load(manifest)?;
    let report = trainer::train(&m, &cfg.generator, &cfg.train, out, resume)?;
    println!(
        "trained to step {}; {} checkpoint(s); metrics {}",
        report.final_step,
        report.checkpoints.len(),
        report.metrics.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_trainer(ckpt: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(&load_checkpoint(ckpt)?)
}

pub fn synth(ckpt: &Path, features: &Path, out: &Path, seed: u64) -> Result<ExitCode> {
    let generator = load_trainer(ckpt)?.generator;
    let feats = read_features(features)?;
    generator.cfg.check_features(&feats)?;
    let s = generator.synthesize(&feats, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let n = s.y_hat.len();
    save_wav(out, &AudioBuffer::new(s.y_hat, generator.cfg.sample_rate))?;
    println!("wrote {} ({n} samples)", out.display());
    Ok(ExitCode::SUCCESS)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn cpu_model() -> Option<String> {
    let info = std::fs::read_to_string("/proc/cpuinfo").ok()?;
    info.lines()
        .find(|l| l.starts_with("model name"))
        .and_then(|l| l.split_once(':'))
        .map(|(_, v)| v.trim().to_string())
}

pub fn bench(
    ckpt: &Path,
    seconds: f64,
    threads: Option<usize>,
    runs: usize,
    seed: u64,
    json_out: Option<&Path>,
) -> Result<ExitCode> {
    if runs == 0 {
        return Err(Error::Config("bench needs at least one timed run".into()));
    }
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let t = load_trainer(ckpt)?;
    let g = &t.generator;
    let feats = bench_features(seconds, g.cfg.sample_rate, g.cfg.hop, g.cfg.n_mels, seed)?;
    let samples = feats.num_samples();
    let synth = || g.synthesize(&feats, &mut ChaCha8Rng::seed_from_u64(seed));

    let start = Instant::now();
    let warm = synth()?;
    let warmup_ms = start.elapsed().as_secs_f64() * 1e3;
    let bytes: Vec<u8> = warm.y_hat.iter().flat_map(|v| v.to_le_bytes()).collect();
    let digest = format!("{:016x}", fnv1a64(&bytes));

    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        synth()?;
        times.push(start.elapsed().as_secs_f64());
    }
    let med = median(&times);
    let mean = times.iter().sum::<f64>() / runs as f64;
    let var = if runs > 1 {
        times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64
    } else {
        0.0
    };
    let (lo, hi) = times
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    let sps = samples as f64 / med;
    let report = json!({
        "samples": samples,
        "seconds_of_audio": samples as f64 / g.cfg.sample_rate as f64,
        "runs": runs,
        "run_seconds": times,
        "median_seconds": med,
        "warmup_ms": warmup_ms,
        // Coefficient of variation; the full range is reported alongside.
        "spread": var.sqrt() / mean,
        "range_spread": (hi - lo) / med,
        "samples_per_sec": sps,
        "rtf": sps / g.cfg.sample_rate as f64,
        "reference_cpu_samples_per_sec": REFERENCE_CPU_SAMPLES_PER_SEC,
        "audio_digest": digest,
        "model": {
            "generator_parameters": g.num_parameters(),
            "step": t.step,
        },
        "machine": {
            "os": std::env::consts::OS,
            "arch": std::env::consts::ARCH,
            "logical_cpus": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            "threads": rayon::current_num_threads(),
            "cpu_model": cpu_model(),
        },
    });
    let text = serde_json::to_string_pretty(&report).expect("JSON values are finite");
    println!("{text}");
    if let Some(p) = json_out {
        std::fs::write(p, &text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(selector: &str, seed: u64, flip_sign: bool) -> Result<ExitCode> {
    let opts = CheckOptions {
        flip_first_sign: flip_sign,
        ..CheckOptions::default()
    };
    let mut all = true;
    for m in parse_selector(selector)? {
        let start = Instant::now();
        let r = run_gradcheck(m, seed, &opts)?;
        print!("{r}");
        println!("  ({:.1} s)", start.elapsed().as_secs_f64());
        all &= r.passed();
    }
    println!("{}", if all { "gradcheck: PASS" } else { "gradcheck: FAIL" });
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn inspect(ckpt: &Path) -> Result<ExitCode> {
    let c = load_checkpoint(ckpt)?;
    let t = Trainer::from_checkpoint(&c)?;
    println!("checkpoint {}", ckpt.display());
    println!("format version {CHECKPOINT_VERSION}");
    println!("step {}", t.step);
    println!("config:");
    for (k, v) in &c.meta {
        println!("  {k}={v}");
    }
    println!("tensors:");
    for n in c.tensors.iter().filter(|n| !n.name.contains("/m.") && !n.name.contains("/v.")) {
        println!("  {:<40} {:?}", n.name, n.shape);
    }
    println!("optimizer moment tensors: {}", c.tensors.len() - t.generator.store.len() - t.discriminator.as_ref().map_or(0, |d| d.store.len()));
    println!("generator parameters: {}", t.generator.num_parameters());
    if let Some(d) = &t.discriminator {
        println!("discriminator parameters: {}", d.num_parameters());
    }
    Ok(ExitCode::SUCCESS)
}
