//! Audio I/O and the acoustic front end.

pub mod dataset;
pub mod f0;
pub mod format;
pub mod manifest;
pub mod mel;
pub mod resample;
pub mod synthetic;
pub mod wav;

use crate::error::{Error, Result};

pub use dataset::{Dataset, TrainingCrop};
pub use f0::{derive_uv, estimate_f0, interpolate_unvoiced, read_f0_text};
pub use format::{read_features, write_features};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use mel::mel_spectrogram;
pub use resample::resample;
pub use wav::{load_wav, save_wav, save_wav_f32};

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;
/// 275 samples ≈ 12.47 ms at 22.05 kHz; 40 hops make an 11 000-sample crop.
pub const DEFAULT_HOP: usize = 275;
/// 50 ms analysis window.
pub const DEFAULT_WIN: usize = 1102;
pub const DEFAULT_FFT: usize = 2048;
pub const DEFAULT_N_MELS: usize = 80;
pub const DEFAULT_F0_MIN: f32 = 50.0;
pub const DEFAULT_F0_MAX: f32 = 600.0;
pub const LOG_MEL_FLOOR: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Scales so the largest magnitude equals `target`. Silent buffers are left alone.
    pub fn peak_normalize(&mut self, target: f32) {
        let peak = self.peak();
        if peak > 0.0 {
            let gain = target / peak;
            self.samples.iter_mut().for_each(|s| *s *= gain);
        }
    }
}

/// Front-end settings shared by preparation, training and synthesis.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub win: usize,
    pub fft: usize,
    pub n_mels: usize,
    pub f0_min: f32,
    pub f0_max: f32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            hop: DEFAULT_HOP,
            win: DEFAULT_WIN,
            fft: DEFAULT_FFT,
            n_mels: DEFAULT_N_MELS,
            f0_min: DEFAULT_F0_MIN,
            f0_max: DEFAULT_F0_MAX,
        }
    }
}

/// Per-utterance vocoder input: log-mel frames, F0 and voicing flags.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    /// `[frames × n_mels]` row-major natural-log mel magnitudes.
    pub mel: Vec<f32>,
    pub n_mels: usize,
    /// Hz; 0 marks an unvoiced frame.
    pub f0_hz: Vec<f32>,
    pub uv: Vec<u8>,
    pub hop_samples: usize,
    pub sample_rate: u32,
}

impl AcousticFeatures {
    pub fn frames(&self) -> usize {
        self.f0_hz.len()
    }

    /// Number of samples the generator produces for these frames.
    pub fn num_samples(&self) -> usize {
        self.frames() * self.hop_samples
    }

    pub fn mel_row(&self, frame: usize) -> &[f32] {
        &self.mel[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    /// Checks shared lengths and `uv[t] = 1 ⇔ f0[t] > 0`.
    pub fn validate(&self) -> Result<()> {
        let t = self.f0_hz.len();
        if t == 0 {
            return Err(Error::invalid("features have zero frames"));
        }
        if self.n_mels == 0 || self.mel.len() != t * self.n_mels {
            return Err(Error::shape(format!(
                "mel has {} values, expected {t} frames × {} bins",
                self.mel.len(),
                self.n_mels
            )));
        }
        if self.uv.len() != t {
            return Err(Error::shape(format!(
                "uv has {} frames, f0 has {t}",
                self.uv.len()
            )));
        }
        if self.hop_samples == 0 || self.sample_rate == 0 {
            return Err(Error::invalid("hop and sample rate must be positive"));
        }
        for (i, (&f, &v)) in self.f0_hz.iter().zip(&self.uv).enumerate() {
            if !f.is_finite() || f < 0.0 {
                return Err(Error::invalid(format!("frame {i}: invalid f0 {f}")));
            }
            if v > 1 || (v == 1) != (f > 0.0) {
                return Err(Error::invalid(format!(
                    "frame {i}: voicing flag {v} inconsistent with f0 {f}"
                )));
            }
        }
        if self.mel.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel features".into()));
        }
        Ok(())
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() {
            return Err(Error::invalid(format!(
                "frame slice {start}..{} exceeds {} frames",
                start + len,
                self.frames()
            )));
        }
        Ok(Self {
            mel: self.mel[start * self.n_mels..(start + len) * self.n_mels].to_vec(),
            n_mels: self.n_mels,
            f0_hz: self.f0_hz[start..start + len].to_vec(),
            uv: self.uv[start..start + len].to_vec(),
            hop_samples: self.hop_samples,
            sample_rate: self.sample_rate,
        })
    }
}

/// Full front end for one utterance already at `cfg.sample_rate`.
pub fn extract_features(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<AcousticFeatures> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::invalid(format!(
            "audio at {} Hz, features expect {} Hz",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let mel = mel_spectrogram(audio, &mel::MelConfig::from(cfg))?;
    let frames = mel.len() / cfg.n_mels;
    let mut f0 = estimate_f0(audio, cfg.f0_min, cfg.f0_max, cfg.hop)?;
    f0.resize(frames, 0.0);
    let uv = derive_uv(&f0)?;
    Ok(AcousticFeatures {
        mel,
        n_mels: cfg.n_mels,
        f0_hz: f0,
        uv,
        hop_samples: cfg.hop,
        sample_rate: cfg.sample_rate,
    })
}

/// Replaces the F0 track with externally computed values (one per frame).
pub fn with_external_f0(mut feats: AcousticFeatures, f0: Vec<f32>) -> Result<AcousticFeatures> {
    if f0.len() != feats.frames() {
        return Err(Error::shape(format!(
            "external F0 has {} frames, mel has {}",
            f0.len(),
            feats.frames()
        )));
    }
    feats.uv = derive_uv(&f0)?;
    feats.f0_hz = f0;
    feats.validate()?;
    Ok(feats)
}
