//! RIFF/WAVE reading and writing (16-bit PCM or 32-bit float, mono output).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioBuffer;
use crate::error::{Error, Result};

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::format("wav", format!("{}: unsupported codec", path.display())),
        other => Error::format("wav", format!("{}: {other}", path.display())),
    }
}

/// Loads a WAV file; multi-channel audio is averaged down to mono.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::format("wav", format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(
                "wav",
                format!("{}: unsupported codec {fmt:?} {bits}-bit", path.display()),
            ))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::format("wav", format!("{}: empty data chunk", path.display())));
    }
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{}: sample data", path.display())));
    }
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

fn quantize(v: f32) -> i16 {
    (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes mono 16-bit PCM, clamping to the representable range.
pub fn save_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &audio.samples {
        w.write_sample(quantize(s)).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

/// Writes mono 32-bit float samples unchanged.
pub fn save_wav_f32(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &audio.samples {
        w.write_sample(s).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut samples: Vec<f32> = (0..5000).map(|_| rng.random_range(-1.0..=1.0)).collect();
        samples.extend([1.0, -1.0, 0.0]);
        let a = AudioBuffer::new(samples, 22050);
        save_wav(&path, &a).unwrap();
        let b = load_wav(&path).unwrap();
        assert_eq!(b.sample_rate, 22050);
        assert_eq!(b.len(), a.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let a = AudioBuffer::new(vec![0.123456, -0.5, 0.999], 48000);
        save_wav_f32(&path, &a).unwrap();
        assert_eq!(load_wav(&path).unwrap(), a);
    }

    #[test]
    fn empty_data_chunk_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        save_wav(&path, &AudioBuffer::new(vec![], 22050)).unwrap();
        assert!(load_wav(&path).is_err());
    }

    #[test]
    fn stereo_is_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mono: Vec<i16> = vec![100, -2000, 32000, 0, -32768];
        let mut w = WavWriter::create(&path, spec).unwrap();
        for &s in &mono {
            w.write_sample(s).unwrap();
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let b = load_wav(&path).unwrap();
        let want: Vec<f32> = mono.iter().map(|&v| v as f32 / 32768.0).collect();
        assert_eq!(b.samples, want);
    }

    #[test]
    fn malformed_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFF\x10\x00\x00\x00WAVEjunkjunk").unwrap();
        assert!(load_wav(&path).is_err());
        assert!(load_wav(dir.path().join("missing.wav")).is_err());
    }

    #[test]
    fn unsupported_codec_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&path), Err(Error::Format { .. })));
    }
}
