//! Dataset preparation and in-memory random cropping.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;

use super::manifest::{DatasetManifest, ManifestEntry};
use super::mel::frame_count;
use super::{
    extract_features, load_wav, read_f0_text, read_features, resample, save_wav_f32, with_external_f0,
    write_features, AcousticFeatures, FeatureConfig,
};
use crate::error::{Error, Result};

pub const PEAK_TARGET: f32 = 0.95;
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug)]
pub struct PrepareReport {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    /// Files that could not be processed, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

/// Sorted `*.wav` files (case-insensitive extension) directly under `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_wav = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn find_f0_file(dir: &Path, id: &str) -> Result<PathBuf> {
    ["f0", "txt"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::Dataset(format!("no F0 file for {id} in {}", dir.display())))
}

fn prepare_one(src: &Path, out_dir: &Path, cfg: &FeatureConfig, f0_dir: Option<&Path>) -> Result<ManifestEntry> {
    let id = src
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Dataset(format!("{}: unusable file name", src.display())))?
        .to_string();
    let raw = load_wav(src)?;
    let mut audio = resample(&raw, cfg.sample_rate)?;
    audio.peak_normalize(PEAK_TARGET);
    let mut feats = extract_features(&audio, cfg)?;
    if let Some(dir) = f0_dir {
        let f0 = read_f0_text(find_f0_file(dir, &id)?)?;
        feats = with_external_f0(feats, f0)?;
    }
    let wav_name = PathBuf::from(format!("{id}.wav"));
    let feat_name = PathBuf::from(format!("{id}.hgf"));
    save_wav_f32(out_dir.join(&wav_name), &audio)?;
    write_features(out_dir.join(&feat_name), &feats)?;
    Ok(ManifestEntry {
        id,
        wav: wav_name,
        features: feat_name,
        frames: feats.frames(),
    })
}

/// Resamples, peak-normalizes and featurizes every WAV in `wav_dir`, writing
/// audio, feature files and `manifest.tsv` into `out_dir`.
pub fn prepare_dataset(
    wav_dir: &Path,
    out_dir: &Path,
    cfg: &FeatureConfig,
    f0_dir: Option<&Path>,
) -> Result<PrepareReport> {
    let wavs = list_wavs(wav_dir)?;
    if wavs.is_empty() {
        return Err(Error::Dataset(format!("no WAV files found in {}", wav_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Result<ManifestEntry>> = wavs
        .par_iter()
        .map(|p| prepare_one(p, out_dir, cfg, f0_dir))
        .collect();
    let mut manifest = DatasetManifest::new(out_dir);
    let mut failures = Vec::new();
    for (p, r) in wavs.into_iter().zip(results) {
        match r {
            Ok(e) => manifest.entries.push(e),
            Err(e) => {
                warn!("skipping {}: {e}", p.display());
                failures.push((p, e.to_string()));
            }
        }
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    manifest.save(&manifest_path)?;
    info!("prepared {} utterances into {}", manifest.len(), out_dir.display());
    Ok(PrepareReport {
        manifest_path,
        manifest,
        failures,
    })
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub audio: Vec<f32>,
    pub features: AcousticFeatures,
}

#[derive(Clone, Debug)]
pub struct TrainingCrop {
    pub utterance: usize,
    pub start_frame: usize,
    pub audio: Vec<f32>,
    pub features: AcousticFeatures,
}

/// Utterances long enough for `crop_samples`, held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub crop_samples: usize,
    pub hop: usize,
}

impl Dataset {
    pub fn from_utterances(utterances: Vec<Utterance>, crop_samples: usize, hop: usize) -> Result<Self> {
        if hop == 0 || crop_samples == 0 || !crop_samples.is_multiple_of(hop) {
            return Err(Error::Config(format!(
                "crop of {crop_samples} samples must be a positive multiple of hop {hop}"
            )));
        }
        let mut kept = Vec::with_capacity(utterances.len());
        for u in utterances {
            if u.features.hop_samples != hop {
                return Err(Error::Dataset(format!(
                    "{}: features use hop {}, training expects {hop}",
                    u.id, u.features.hop_samples
                )));
            }
            if u.audio.len() < crop_samples {
                warn!("skipping {}: {} samples < crop {crop_samples}", u.id, u.audio.len());
                continue;
            }
            if u.features.frames() != frame_count(u.audio.len(), hop) {
                return Err(Error::Dataset(format!(
                    "{}: {} frames do not match {} audio samples at hop {hop}",
                    u.id,
                    u.features.frames(),
                    u.audio.len()
                )));
            }
            kept.push(u);
        }
        if kept.is_empty() {
            return Err(Error::Dataset(format!("no utterance has at least {crop_samples} samples")));
        }
        Ok(Self {
            utterances: kept,
            crop_samples,
            hop,
        })
    }

    pub fn load(manifest: &DatasetManifest, crop_samples: usize, hop: usize) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Dataset("manifest lists no utterances".into()));
        }
        let utts = manifest
            .entries
            .par_iter()
            .map(|e| {
                let audio = load_wav(manifest.resolve(&e.wav))?;
                let features = read_features(manifest.resolve(&e.features))?;
                if features.frames() != e.frames {
                    return Err(Error::Dataset(format!(
                        "{}: manifest says {} frames, feature file has {}",
                        e.id,
                        e.frames,
                        features.frames()
                    )));
                }
                if audio.sample_rate != features.sample_rate {
                    return Err(Error::Dataset(format!(
                        "{}: audio at {} Hz, features at {} Hz",
                        e.id, audio.sample_rate, features.sample_rate
                    )));
                }
                Ok(Utterance {
                    id: e.id.clone(),
                    audio: audio.samples,
                    features,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_utterances(utts, crop_samples, hop)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn crop_frames(&self) -> usize {
        self.crop_samples / self.hop
    }

    /// Uniform utterance, then a uniform frame-aligned offset.
    pub fn sample_training_crop<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TrainingCrop> {
        let utterance = rng.random_range(0..self.utterances.len());
        let u = &self.utterances[utterance];
        let max_start = (u.audio.len() - self.crop_samples) / self.hop;
        let start_frame = rng.random_range(0..=max_start);
        let s = start_frame * self.hop;
        Ok(TrainingCrop {
            utterance,
            start_frame,
            audio: u.audio[s..s + self.crop_samples].to_vec(),
            features: u.features.slice(start_frame, self.crop_frames())?,
        })
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Result<Vec<TrainingCrop>> {
        (0..batch).map(|_| self.sample_training_crop(rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn utt(id: &str, samples: usize) -> Utterance {
        let frames = frame_count(samples, 275);
        Utterance {
            id: id.into(),
            audio: (0..samples).map(|i| i as f32).collect(),
            features: AcousticFeatures {
                mel: (0..frames * 2).map(|i| (i / 2) as f32).collect(),
                n_mels: 2,
                f0_hz: vec![100.0; frames],
                uv: vec![1; frames],
                hop_samples: 275,
                sample_rate: 22050,
            },
        }
    }

    #[test]
    fn crops_are_frame_aligned() {
        let ds = Dataset::from_utterances(vec![utt("a", 30000), utt("b", 11000), utt("c", 500)], 11000, 275).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.crop_frames(), 40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let c = ds.sample_training_crop(&mut rng).unwrap();
            assert_eq!(c.audio.len(), 11000);
            assert_eq!(c.audio[0] as usize % 275, 0);
            assert_eq!(c.audio[0] as usize / 275, c.start_frame);
            assert_eq!(c.features.frames(), 40);
            assert_eq!(c.features.mel[0] as usize, c.start_frame);
        }
    }

    #[test]
    fn same_seed_same_crop() {
        let ds = Dataset::from_utterances(vec![utt("a", 30000), utt("b", 20000)], 11000, 275).unwrap();
        let a = ds.sample_training_crop(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ds.sample_training_crop(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((a.utterance, a.start_frame), (b.utterance, b.start_frame));
        assert_eq!(a.audio, b.audio);
    }

    #[test]
    fn bad_geometry_is_rejected() {
        assert!(Dataset::from_utterances(vec![utt("a", 30000)], 11001, 275).is_err());
        assert!(Dataset::from_utterances(vec![utt("a", 300)], 11000, 275).is_err());
    }
}
