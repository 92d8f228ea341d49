//! Generated material: a small harmonic corpus for smoke training and
//! dataset-free benchmark features.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{Utterance, PEAK_TARGET};
use super::{extract_features, save_wav, AcousticFeatures, AudioBuffer, FeatureConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub utterances: usize,
    pub seconds_each: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub noise_floor: f64,
}

impl Default for CorpusConfig {
    /// 60 s in total.
    fn default() -> Self {
        Self {
            utterances: 30,
            seconds_each: 2.0,
            sample_rate: 22050,
            seed: 0,
            noise_floor: 0.003,
        }
    }
}

/// One utterance: a pitch glide with a 1/j^tilt harmonic spectrum, a silent
/// (noise-only) stretch, a smooth envelope and a Gaussian noise floor.
pub fn harmonic_utterance(cfg: &CorpusConfig, index: usize) -> AudioBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(index as u64));
    let sr = cfg.sample_rate as f64;
    let n = (cfg.seconds_each * sr).round() as usize;
    let f_start: f64 = rng.random_range(90.0..280.0);
    let f_end: f64 = rng.random_range(90.0..280.0);
    let tilt: f64 = rng.random_range(0.8..1.6);
    let gap_start = rng.random_range(0.55..0.7) * n as f64;
    let gap_len = 0.15 * n as f64;
    let noise = Normal::new(0.0, cfg.noise_floor).unwrap();
    let fade = 0.02 * sr;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let r = i as f64 / n as f64;
        let f0 = f_start * (f_end / f_start).powf(r);
        phase += f0 / sr;
        let t = i as f64;
        let voiced_env = {
            let in_gap = t >= gap_start && t < gap_start + gap_len;
            let edge = (t.min(n as f64 - t) / fade).min(1.0);
            let gap_edge = if in_gap {
                0.0
            } else {
                ((t - gap_start - gap_len).abs().min((t - gap_start).abs()) / fade).min(1.0)
            };
            edge * gap_edge
        };
        let mut s = 0.0;
        let mut j = 1;
        while j as f64 * f0 < 0.45 * sr && j <= 40 {
            s += (2.0 * PI * j as f64 * phase).sin() / (j as f64).powf(tilt);
            j += 1;
        }
        out.push((0.3 * voiced_env * s + noise.sample(&mut rng)) as f32);
    }
    AudioBuffer::new(out, cfg.sample_rate)
}

/// Writes `synth_000.wav`, `synth_001.wav`, … into `dir`.
pub fn write_harmonic_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..cfg.utterances)
        .map(|i| {
            let p = dir.join(format!("synth_{i:03}.wav"));
            save_wav(&p, &harmonic_utterance(cfg, i))?;
            Ok(p)
        })
        .collect()
}

/// The harmonic corpus featurized in memory, peak-normalized as on disk.
pub fn harmonic_utterances(corpus: &CorpusConfig, feat: &FeatureConfig) -> Result<Vec<Utterance>> {
    (0..corpus.utterances)
        .into_par_iter()
        .map(|i| {
            let mut audio = harmonic_utterance(corpus, i);
            audio.peak_normalize(PEAK_TARGET);
            let features = extract_features(&audio, feat)?;
            Ok(Utterance {
                id: format!("harmonic_{i:03}"),
                audio: audio.samples,
                features,
            })
        })
        .collect()
}

/// Fully voiced features whose F0 saws from 80 to 300 Hz once per second,
/// with uniformly random log-mel values.
pub fn bench_features(
    seconds: f64,
    sample_rate: u32,
    hop: usize,
    n_mels: usize,
    seed: u64,
) -> Result<AcousticFeatures> {
    if seconds.is_nan() || seconds <= 0.0 || hop == 0 || n_mels == 0 {
        return Err(Error::invalid(format!("bench needs positive duration, hop and mels (got {seconds} s)")));
    }
    let frames = ((seconds * sample_rate as f64) / hop as f64).ceil() as usize;
    let frame_rate = sample_rate as f64 / hop as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0_hz: Vec<f32> = (0..frames)
        .map(|t| {
            let pos = (t as f64 / frame_rate).fract();
            (80.0 + 220.0 * pos) as f32
        })
        .collect();
    let feats = AcousticFeatures {
        mel: (0..frames * n_mels).map(|_| rng.random_range(-8.0..0.0)).collect(),
        n_mels,
        uv: vec![1; frames],
        f0_hz,
        hop_samples: hop,
        sample_rate,
    };
    feats.validate()?;
    Ok(feats)
}
