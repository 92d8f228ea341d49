//! Log-mel spectrogram with center padding and a Slaney-style filterbank.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{AudioBuffer, FeatureConfig, LOG_MEL_FLOOR};
use crate::error::{Error, Result};
use crate::numcore::stft::{hann, reflect_index};

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub fft: usize,
    pub win: usize,
    pub hop: usize,
}

impl From<&FeatureConfig> for MelConfig {
    fn from(c: &FeatureConfig) -> Self {
        Self {
            sample_rate: c.sample_rate,
            n_mels: c.n_mels,
            fft: c.fft,
            win: c.win,
            hop: c.hop,
        }
    }
}

impl Default for MelConfig {
    fn default() -> Self {
        Self::from(&FeatureConfig::default())
    }
}

/// `ceil(T / hop) + 1`: frame `t` is centered on sample `t·hop`.
pub fn frame_count(num_samples: usize, hop: usize) -> usize {
    num_samples.div_ceil(hop) + 1
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    }
}

/// `[n_mels × (fft/2+1)]` triangular filters spanning 0 Hz to Nyquist,
/// each scaled to unit area in Hz.
pub fn mel_filterbank(sample_rate: u32, fft: usize, n_mels: usize) -> Vec<f64> {
    let bins = fft / 2 + 1;
    let sr = sample_rate as f64;
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (f0, f1, f2) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (f2 - f0);
        for b in 0..bins {
            let f = b as f64 * sr / fft as f64;
            let up = (f - f0) / (f1 - f0);
            let down = (f2 - f) / (f2 - f1);
            fb[m * bins + b] = up.min(down).max(0.0) * enorm;
        }
    }
    fb
}

/// Returns `[frames × n_mels]` row-major `ln(max(mel, 1e-5))`.
pub fn mel_spectrogram(audio: &AudioBuffer, cfg: &MelConfig) -> Result<Vec<f32>> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "mel expects {} Hz audio, got {} Hz",
            cfg.sample_rate, audio.sample_rate
        )));
    }
    if cfg.hop == 0 || cfg.n_mels == 0 || cfg.win == 0 || cfg.win > cfg.fft {
        return Err(Error::invalid(format!(
            "bad mel geometry: fft {} win {} hop {} mels {}",
            cfg.fft, cfg.win, cfg.hop, cfg.n_mels
        )));
    }
    let x = &audio.samples;
    let pad = cfg.fft / 2;
    if x.len() < cfg.win || x.len() <= pad {
        return Err(Error::invalid(format!(
            "audio of {} samples is shorter than one analysis window ({} samples)",
            x.len(),
            cfg.win.max(pad + 1)
        )));
    }
    let frames = frame_count(x.len(), cfg.hop);
    let bins = cfg.fft / 2 + 1;
    let fb = mel_filterbank(cfg.sample_rate, cfg.fft, cfg.n_mels);
    let window: Vec<f64> = hann(cfg.win);
    let offset = (cfg.fft - cfg.win) / 2;
    // Samples beyond the right reflection margin (needed when T is not a
    // multiple of hop) read as zero.
    let padded_len = x.len() + 2 * pad;
    let sample = |j: usize| -> f64 {
        if j >= padded_len {
            0.0
        } else {
            x[reflect_index(j, pad, x.len())] as f64
        }
    };
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft];
    let mut mags = vec![0.0f64; bins];
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for t in 0..frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, w) in window.iter().enumerate() {
            buf[offset + i].re = w * sample(start + offset + i);
        }
        fft.process(&mut buf);
        for (m, c) in mags.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for row in fb.chunks_exact(bins) {
            let e: f64 = row.iter().zip(&mags).map(|(a, b)| a * b).sum();
            out.push(e.max(LOG_MEL_FLOOR as f64).ln() as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> AudioBuffer {
        AudioBuffer::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin()) as f32)
                .collect(),
            22050,
        )
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 440.0, 999.0, 1000.0, 4321.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn filters_have_unit_area() {
        // Trapezoid integration of each triangle over the bin grid.
        let fft = 8192;
        let fb = mel_filterbank(22050, fft, 80);
        let df = 22050.0 / fft as f64;
        let bins = fft / 2 + 1;
        for row in fb.chunks_exact(bins).skip(2) {
            let area: f64 = row.iter().sum::<f64>() * df;
            assert!((area - 1.0).abs() < 0.02, "area {area}");
        }
    }

    #[test]
    fn silence_gives_floor() {
        let m = mel_spectrogram(&AudioBuffer::new(vec![0.0; 11000], 22050), &MelConfig::default()).unwrap();
        assert_eq!(m.len(), 41 * 80);
        let floor = (1e-5f64).ln() as f32;
        assert!(m.iter().all(|&v| v == floor));
        assert!((floor + 11.5129).abs() < 1e-4);
    }

    #[test]
    fn frame_count_matches_center_padding() {
        assert_eq!(frame_count(11000, 275), 41);
        assert_eq!(frame_count(11001, 275), 42);
        let m = mel_spectrogram(&tone(220.0, 11001), &MelConfig::default()).unwrap();
        assert_eq!(m.len(), 42 * 80);
    }

    #[test]
    fn tone_peak_band_is_stable() {
        let m = mel_spectrogram(&tone(220.0, 11000), &MelConfig::default()).unwrap();
        let argmax: Vec<usize> = m
            .chunks_exact(80)
            .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0)
            .collect();
        assert!(argmax.iter().all(|&a| a == argmax[0]), "{argmax:?}");
        // Band whose center is nearest 220 Hz, or one of its neighbours.
        let hi = hz_to_mel(11025.0);
        let centers: Vec<f64> = (1..=80).map(|i| mel_to_hz(hi * i as f64 / 81.0)).collect();
        let nearest = centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 220.0).abs().total_cmp(&(b.1 - 220.0).abs()))
            .unwrap()
            .0;
        assert!(argmax[0].abs_diff(nearest) <= 1);
    }

    #[test]
    fn silence_then_tone_floor_boundary() {
        let mut a = vec![0.0f32; 5500];
        a.extend(tone(440.0, 5500).samples);
        let m = mel_spectrogram(&AudioBuffer::new(a, 22050), &MelConfig::default()).unwrap();
        let floor = (1e-5f64).ln() as f32;
        let onset = 5500 / 275;
        for (t, row) in m.chunks_exact(80).enumerate() {
            let silent = row.iter().all(|&v| v == floor);
            if t + 2 < onset {
                assert!(silent, "frame {t} should be floor");
            } else if t > onset + 2 {
                assert!(!silent, "frame {t} should carry the tone");
            }
        }
    }

    #[test]
    fn short_audio_is_rejected() {
        assert!(mel_spectrogram(&AudioBuffer::new(vec![0.0; 1000], 22050), &MelConfig::default()).is_err());
        assert!(mel_spectrogram(&AudioBuffer::new(vec![0.0; 5000], 16000), &MelConfig::default()).is_err());
    }
}
