//! YIN pitch tracking, voicing flags and gap filling.

use std::path::Path;

use rayon::prelude::*;

use super::AudioBuffer;
use super::mel::frame_count;
use crate::error::{Error, Result};

/// Integration window of the difference function.
pub const YIN_WINDOW: usize = 1024;
pub const YIN_THRESHOLD: f64 = 0.1;
/// Frames quieter than this RMS are unvoiced without further analysis.
pub const ENERGY_GATE: f64 = 1e-4;
/// Value used when an utterance has no voiced frame at all.
pub const UNVOICED_FALLBACK_HZ: f32 = 100.0;

fn yin_frame(seg: &[f64], tau_min: usize, tau_max: usize, sr: f64) -> Option<f64> {
    let w = YIN_WINDOW;
    let energy: f64 = seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64;
    if energy.sqrt() < ENERGY_GATE {
        return None;
    }
    let mut d = vec![0.0f64; tau_max + 2];
    for (tau, dt) in d.iter_mut().enumerate().skip(1) {
        let (a, b) = (&seg[..w], &seg[tau..tau + w]);
        *dt = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    }
    // cumulative mean normalised difference
    let mut cmnd = vec![1.0f64; d.len()];
    let mut running = 0.0;
    for tau in 1..d.len() {
        running += d[tau];
        cmnd[tau] = if running > 0.0 { d[tau] * tau as f64 / running } else { 1.0 };
    }
    let mut tau = tau_min.max(2);
    while tau <= tau_max {
        if cmnd[tau] < YIN_THRESHOLD {
            while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            let (l, c, r) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
            let denom = l - 2.0 * c + r;
            let shift = if denom.abs() > 1e-12 {
                (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            return Some(sr / (tau as f64 + shift));
        }
        tau += 1;
    }
    None
}

/// One F0 value per mel frame (frame `t` centered at `t·hop`); unvoiced frames are 0.
pub fn estimate_f0(audio: &AudioBuffer, f0_min: f32, f0_max: f32, hop: usize) -> Result<Vec<f32>> {
    if !(f0_min > 0.0 && f0_max > f0_min) || hop == 0 {
        return Err(Error::invalid(format!(
            "bad F0 search range {f0_min}..{f0_max} Hz or hop {hop}"
        )));
    }
    let sr = audio.sample_rate as f64;
    let tau_max = (sr / f0_min as f64).ceil() as usize;
    let tau_min = ((sr / f0_max as f64).floor() as usize).max(2);
    let span = YIN_WINDOW + tau_max + 2;
    let x = &audio.samples;
    let frames = frame_count(x.len(), hop);
    let f0 = (0..frames)
        .into_par_iter()
        .map(|t| {
            let start = (t * hop) as isize - (span / 2) as isize;
            let seg: Vec<f64> = (0..span as isize)
                .map(|j| {
                    let i = start + j;
                    if i >= 0 && (i as usize) < x.len() {
                        x[i as usize] as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            match yin_frame(&seg, tau_min, tau_max, sr) {
                Some(f) if f >= f0_min as f64 && f <= f0_max as f64 => f as f32,
                _ => 0.0,
            }
        })
        .collect();
    Ok(f0)
}

/// `v = 1` where `f0 > 0`.
pub fn derive_uv(f0_hz: &[f32]) -> Result<Vec<u8>> {
    f0_hz
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            if !f.is_finite() || f < 0.0 {
                Err(Error::invalid(format!("frame {i}: F0 {f} must be finite and ≥ 0")))
            } else {
                Ok(u8::from(f > 0.0))
            }
        })
        .collect()
}

/// Linear interpolation across zero runs; edges hold the nearest voiced value.
pub fn interpolate_unvoiced(f0_hz: &[f32]) -> Vec<f32> {
    let voiced: Vec<usize> = (0..f0_hz.len()).filter(|&i| f0_hz[i] > 0.0).collect();
    let (Some(&first), Some(&last)) = (voiced.first(), voiced.last()) else {
        return vec![UNVOICED_FALLBACK_HZ; f0_hz.len()];
    };
    let mut out = f0_hz.to_vec();
    out[..first].fill(f0_hz[first]);
    out[last + 1..].fill(f0_hz[last]);
    for pair in voiced.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (fa, fb) = (f0_hz[a] as f64, f0_hz[b] as f64);
        for (i, o) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let r = (i - a) as f64 / (b - a) as f64;
            *o = (fa + (fb - fa) * r) as f32;
        }
    }
    out
}

/// Reads one F0 value per line (blank lines ignored).
pub fn read_f0_text(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f32 = line.parse().map_err(|_| {
            Error::format("f0 text", format!("{}:{}: not a number: {line:?}", path.display(), n + 1))
        })?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::format(
                "f0 text",
                format!("{}:{}: F0 must be finite and ≥ 0, got {v}", path.display(), n + 1),
            ));
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sine(freq: f64, n: usize) -> AudioBuffer {
        AudioBuffer::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin()) as f32)
                .collect(),
            22050,
        )
    }

    #[test]
    fn sine_is_tracked() {
        for freq in [220.0, 97.0, 410.0] {
            let f0 = estimate_f0(&sine(freq, 22050), 50.0, 600.0, 275).unwrap();
            let interior = &f0[3..f0.len() - 3];
            for &f in interior {
                assert!((f as f64 - freq).abs() <= 2.0, "{freq}: got {f}");
            }
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let f0 = estimate_f0(&AudioBuffer::new(vec![0.0; 11000], 22050), 50.0, 600.0, 275).unwrap();
        assert_eq!(f0.len(), 41);
        assert!(f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..22050)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    (0.2 * v) as f32
                })
                .collect();
            let f0 = estimate_f0(&AudioBuffer::new(x, 22050), 50.0, 600.0, 275).unwrap();
            let unvoiced = f0.iter().filter(|&&f| f == 0.0).count();
            assert!(unvoiced * 10 >= f0.len() * 9, "seed {seed}: {unvoiced}/{}", f0.len());
        }
    }

    #[test]
    fn uv_examples() {
        assert_eq!(derive_uv(&[0.0, 120.5, 0.0, 98.2]).unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(derive_uv(&[0.0; 3]).unwrap(), vec![0; 3]);
        assert_eq!(derive_uv(&[1.0, 2.0]).unwrap(), vec![1, 1]);
        assert!(derive_uv(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let out = interpolate_unvoiced(&[0.0, 100.0, 0.0, 0.0, 200.0]);
        let want = [100.0, 100.0, 133.333, 166.667, 200.0];
        for (o, w) in out.iter().zip(want) {
            assert!((o - w).abs() < 1e-3);
        }
        let full = [110.0, 120.0, 130.0];
        assert_eq!(interpolate_unvoiced(&full), full);
        assert_eq!(interpolate_unvoiced(&[0.0; 4]), vec![100.0; 4]);
        assert_eq!(interpolate_unvoiced(&[0.0, 0.0, 150.0, 0.0]), vec![150.0; 4]);
    }

    #[test]
    fn interpolation_is_idempotent() {
        let once = interpolate_unvoiced(&[0.0, 80.0, 0.0, 0.0, 0.0, 300.0, 0.0, 90.0, 0.0]);
        assert_eq!(interpolate_unvoiced(&once), once);
        assert!(once.iter().all(|&f| f >= 80.0));
    }

    #[test]
    fn f0_text_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f0");
        std::fs::write(&p, "0\n120.5\n\n98.25\n").unwrap();
        assert_eq!(read_f0_text(&p).unwrap(), vec![0.0, 120.5, 98.25]);
        std::fs::write(&p, "0\nabc\n").unwrap();
        assert!(read_f0_text(&p).is_err());
        std::fs::write(&p, "-3\n").unwrap();
        assert!(read_f0_text(&p).is_err());
    }
}
