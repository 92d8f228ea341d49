//! One PASS/FAIL line per acceptance criterion, written straight to stdout so
//! it shows without `--nocapture`. Tests hold a shared lock so that timings
//! are not distorted by each other.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hooligan::excitation::{gate_unvoiced, harmonic_frequencies, harmonic_mask, harmonic_phase, render_harmonics};
use hooligan::features::dataset::{Dataset, Utterance};
use hooligan::features::format::{decode_features, encode_features};
use hooligan::features::synthetic::{harmonic_utterances, CorpusConfig};
use hooligan::features::{read_features, write_features, FeatureConfig};
use hooligan::filter::{measure_receptive_field, GeneratorConfig, GeneratorModel, WaveNetConfig};
use hooligan::gan::{
    adversarial_loss, discriminator_loss, generator_loss_value, multi_stft_loss, LossWeights, ScaleOutput,
};
use hooligan::numcore::{Graph, Tensor};
use hooligan::trainer::checkpoint::{decode_checkpoint, encode_checkpoint};
use hooligan::trainer::{load_checkpoint, save_checkpoint, StepMetrics, TrainConfig, Trainer};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, ok: bool, detail: impl AsRef<str>) {
    let line = format!("{} {name}: {}\n", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(ok, "{name}: {}", detail.as_ref());
}

fn small_corpus(seconds: f64, utterances: usize) -> Vec<Utterance> {
    let corpus = CorpusConfig {
        utterances,
        seconds_each: seconds,
        seed: 5,
        ..CorpusConfig::default()
    };
    harmonic_utterances(&corpus, &FeatureConfig::default()).unwrap()
}

#[test]
fn gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let out = run(&["gradcheck", "--module", "all"]);
    let secs = start.elapsed().as_secs_f64();
    let text = stdout(&out);
    let modules = text.lines().filter(|l| l.starts_with("[PASS]")).count();
    let ok = code(&out) == 0 && modules == 3 && secs < 300.0;
    report(
        "gradient suite",
        ok,
        format!("{modules}/3 modules within 1e-3 rel / 1e-5 abs in {secs:.1} s (limit 300 s)"),
    );
}

#[test]
fn dsp_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let k = 8;
    let t = 500;
    let f0: Vec<f64> = (0..t).map(|_| rng.random_range(0.001..0.02)).collect();

    let f = harmonic_frequencies(&f0, k).unwrap();
    let freq_ok = (0..t).all(|i| (0..k).all(|j| f[i * k + j] == (j + 1) as f64 * f0[i]));

    let edge = harmonic_frequencies(&[150.0 / 22050.0], 23).unwrap();
    let m = harmonic_mask(&edge, 22050.0);
    let mask_ok = m[21] == 1.0 && m[22] == 0.0 && m[..21].iter().all(|&v| v == 1.0);

    let theta = harmonic_phase(&f, k);
    let mut phase_err = 0.0f64;
    for j in 0..k {
        let mut acc = 0.0;
        for i in 0..t {
            acc += f[i * k + j];
            phase_err = phase_err.max((theta[i * k + j] - 2.0 * PI * acc).abs());
        }
    }

    let n = 64;
    let ones = vec![1.0; n];
    let sine = render_harmonics(&vec![0.25; n], &ones, &ones, &ones, &[0.0]).unwrap();
    let sine_err = (0..n)
        .map(|i| (sine[i] - (PI / 2.0 * (i + 1) as f64).sin()).abs())
        .fold(0.0, f64::max);

    let hop = 4;
    let uv: Vec<u8> = (0..t / hop).map(|i| u8::from(i % 3 != 0)).collect();
    let p = render_harmonics(&f, &vec![1.0; t * k], &vec![1.0; t * k], &vec![0.7; t], &vec![0.3; k]).unwrap();
    let gated = gate_unvoiced(&p, &uv, hop, k).unwrap();
    let unvoiced_energy: f64 = gated
        .iter()
        .enumerate()
        .filter(|(i, _)| uv[i / k / hop] == 0)
        .map(|(_, v)| v * v)
        .sum();

    let secs = start.elapsed().as_secs_f64();
    let ok = freq_ok && mask_ok && phase_err <= 1e-6 && sine_err <= 1e-6 && unvoiced_energy == 0.0 && secs < 60.0;
    report(
        "dsp oracles",
        ok,
        format!(
            "frequencies exact={freq_ok}, mask at 150 Hz j=22/23 = {}/{}, phase err {phase_err:.1e}, \
             sine err {sine_err:.1e} (limit 1e-6), unvoiced energy {unvoiced_energy}, {secs:.2} s",
            m[21], m[22]
        ),
    );
}

#[test]
fn loss_identities() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<f64> = (0..4096).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut g = Graph::<f64>::new();
    let yv = g.constant(Tensor::from_vec(y));
    let w = LossWeights::default();
    let stft = multi_stft_loss(&mut g, yv, yv, yv, &w.fft_sizes).unwrap();
    let stft = g.scalar(stft);

    let gen = generator_loss_value(1.0, 0.5, 0.01, &w);

    let scale = |g: &mut Graph<f64>, v: f64| ScaleOutput {
        features: vec![],
        output: g.constant(Tensor::matrix(1, 16, vec![v; 16]).unwrap()),
    };
    let real: Vec<_> = (0..3).map(|_| scale(&mut g, 1.0)).collect();
    let fake: Vec<_> = (0..3).map(|_| scale(&mut g, 0.0)).collect();
    let perfect = discriminator_loss(&mut g, &real, &fake).unwrap();
    let perfect = g.scalar(perfect);
    let half: Vec<_> = (0..3).map(|_| scale(&mut g, 0.5)).collect();
    let adv = adversarial_loss(&mut g, &half).unwrap();
    let adv = g.scalar(adv);

    let ok = stft == 0.0 && gen == 4.0 && perfect == 0.0 && adv == 0.25;
    report(
        "loss identities",
        ok,
        format!("L_stft(y,y,y)={stft}, L_G(1,0.5,0.01)={gen}, L_D perfect={perfect}, L_adv at 0.5={adv}"),
    );
}

#[test]
fn receptive_field() {
    let _g = serial();
    let start = Instant::now();
    let cfg = WaveNetConfig::default();
    let measured = measure_receptive_field(&cfg, 1).unwrap();
    let closed = 1 + 3 * 4 * ((1 << 10) - 1);
    let secs = start.elapsed().as_secs_f64();
    let ok = measured == 12_277 && measured == closed && cfg.receptive_field() == closed && secs < 60.0;
    report(
        "receptive field",
        ok,
        format!("measured {measured}, closed form {closed}, {secs:.1} s"),
    );
}

#[test]
fn parameter_count() {
    let _g = serial();
    let n = GeneratorModel::new(&GeneratorConfig::default(), 0).unwrap().num_parameters();
    report(
        "parameter count",
        (1_000_000..=1_600_000).contains(&n),
        format!("{n} generator parameters (band 1.0M to 1.6M around 1.3M)"),
    );
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

#[test]
fn toy_training_regression() {
    let _g = serial();
    let start = Instant::now();
    let gen = GeneratorConfig::toy();
    let cfg = TrainConfig::toy();
    let utts = harmonic_utterances(&CorpusConfig::default(), &FeatureConfig::default()).unwrap();
    let total_seconds: f64 = utts.iter().map(|u| u.audio.len() as f64).sum::<f64>() / 22050.0;
    let data = Dataset::from_utterances(utts, cfg.crop, gen.hop).unwrap();
    let mut trainer = Trainer::new(&gen, &cfg).unwrap();
    let mut trace: Vec<StepMetrics> = Vec::new();
    trainer.run(&data, cfg.total_steps, None, |m| trace.push(m.clone())).unwrap();
    let secs = start.elapsed().as_secs_f64();

    let pre = cfg.pretrain_steps as usize;
    let first = mean(trace[..100].iter().map(|m| m.l_stft));
    let last = mean(trace[pre - 100..pre].iter().map(|m| m.l_stft));
    let adversarial = &trace[pre..];
    let finite = adversarial.iter().all(|m| {
        [Some(m.l_stft), m.l_adv, m.l_fm, Some(m.l_g), m.l_d]
            .iter()
            .all(|v| v.is_some_and(f64::is_finite))
    });
    let in_band = adversarial
        .iter()
        .filter(|m| m.l_d.is_some_and(|d| d > 0.0 && d <= 0.5))
        .count();
    let ok = trace.len() == cfg.total_steps as usize
        && last <= 0.6 * first
        && finite
        && in_band > 0
        && secs < 45.0 * 60.0;
    report(
        "toy training",
        ok,
        format!(
            "{total_seconds:.0} s corpus, L_stft first-100 {first:.4} final-100 {last:.4} ratio {:.3} (limit 0.6); \
             {} adversarial steps finite={finite}, L_D in (0, 0.5] at {in_band} steps; {:.1} min",
            last / first,
            adversarial.len(),
            secs / 60.0
        ),
    );
}

fn loss_key(m: &StepMetrics) -> (u64, f64, Option<f64>, Option<f64>, f64, Option<f64>) {
    (m.step, m.l_stft, m.l_adv, m.l_fm, m.l_g, m.l_d)
}

#[test]
fn determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let utts = small_corpus(1.0, 4);
    let feats = dir.path().join("u.hgf");
    write_features(&feats, &utts[0].features).unwrap();
    let ckpt = dir.path().join("toy.hgck");
    assert_eq!(code(&run(&["init", "--config", s(&repo_config("toy.conf")), "--out", s(&ckpt)])), 0);
    let synth = |name: &str| {
        let p = dir.path().join(name);
        let out = run(&["synth", "--ckpt", s(&ckpt), "--features", s(&feats), "--out", s(&p), "--seed", "5"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(p).unwrap()
    };
    let (a, b) = (synth("a.wav"), synth("b.wav"));
    let wav_ok = a == b;

    let gen = GeneratorConfig::toy();
    let cfg = TrainConfig {
        batch_size: 2,
        pretrain_steps: 2,
        total_steps: 5,
        ..TrainConfig::toy()
    };
    let data = Dataset::from_utterances(utts, cfg.crop, gen.hop).unwrap();
    let mut t = Trainer::new(&gen, &cfg).unwrap();
    let reference: Vec<_> = (0..5).map(|_| loss_key(&t.train_step(&data).unwrap())).collect();
    let mut resumed_ok = true;
    for split in [2, 3] {
        let mut t = Trainer::new(&gen, &cfg).unwrap();
        let mut trace: Vec<_> = (0..split).map(|_| loss_key(&t.train_step(&data).unwrap())).collect();
        let path = dir.path().join(format!("split{split}.hgck"));
        save_checkpoint(&path, &t.to_checkpoint()).unwrap();
        drop(t);
        let mut t = Trainer::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
        trace.extend((split..5).map(|_| loss_key(&t.train_step(&data).unwrap())));
        resumed_ok &= trace == reference;
    }
    report(
        "determinism",
        wav_ok && resumed_ok,
        format!(
            "synth twice identical={wav_ok} ({} bytes); 5-step trace resumed at steps 2 and 3 identical={resumed_ok}",
            a.len()
        ),
    );
}

#[test]
fn format_round_trips() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let utts = small_corpus(1.0, 2);
    let f = &utts[1].features;
    let bytes = encode_features(f).unwrap();
    let decoded = decode_features(&bytes).unwrap();
    let path = dir.path().join("f.hgf");
    write_features(&path, f).unwrap();
    let features_ok = &decoded == f
        && encode_features(&decoded).unwrap() == bytes
        && read_features(&path).unwrap() == *f
        && fs::read(&path).unwrap() == bytes;

    let gen = GeneratorConfig::toy();
    let cfg = TrainConfig {
        batch_size: 1,
        pretrain_steps: 0,
        total_steps: 1,
        ..TrainConfig::toy()
    };
    let data = Dataset::from_utterances(utts, cfg.crop, gen.hop).unwrap();
    let mut t = Trainer::new(&gen, &cfg).unwrap();
    t.train_step(&data).unwrap();
    let ckpt = t.to_checkpoint();
    let cbytes = encode_checkpoint(&ckpt).unwrap();
    let back = decode_checkpoint(&cbytes).unwrap();
    let cpath = dir.path().join("c.hgck");
    save_checkpoint(&cpath, &ckpt).unwrap();
    let ckpt_ok = back == ckpt
        && encode_checkpoint(&back).unwrap() == cbytes
        && load_checkpoint(&cpath).unwrap() == ckpt
        && Trainer::from_checkpoint(&back).unwrap().to_checkpoint() == ckpt;

    let mut detected = 0;
    let positions = [cbytes.len() / 3, cbytes.len() / 2, cbytes.len() - 12, cbytes.len() - 1];
    for &i in &positions {
        let mut bad = cbytes.clone();
        bad[i] ^= 0x01;
        if decode_checkpoint(&bad).is_err_and(|e| e.to_string().contains("digest")) {
            detected += 1;
        }
    }
    let ok = features_ok && ckpt_ok && detected == positions.len();
    report(
        "format round trips",
        ok,
        format!(
            "features bit-exact={features_ok}, checkpoint ({} bytes) bit-exact={ckpt_ok}, \
             corrupted digest detected {detected}/{}",
            cbytes.len(),
            positions.len()
        ),
    );
}

#[test]
fn benchmark_harness() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("toy.hgck");
    assert_eq!(code(&run(&["init", "--config", s(&repo_config("toy.conf")), "--out", s(&ckpt)])), 0);
    let json = dir.path().join("bench.json");
    let out = run(&["bench", "--ckpt", s(&ckpt), "--seconds", "30", "--runs", "5", "--json", s(&json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let num = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
    let (sps, rtf, spread) = (num("samples_per_sec"), num("rtf"), num("spread"));
    let ok = sps > 0.0
        && rtf > 0.0
        && num("runs") == 5.0
        && spread < 0.10
        && num("reference_cpu_samples_per_sec") == 35_000.0
        && stdout(&out).contains("samples_per_sec");
    report(
        "benchmark harness",
        ok,
        format!(
            "{sps:.0} samples/s (median of 5), real-time factor {rtf:.3}, spread {:.1}% (limit 10%, \
             max-min range {:.1}%), reference {} samples/s",
            100.0 * spread,
            100.0 * num("range_spread"),
            num("reference_cpu_samples_per_sec")
        ),
    );
}
