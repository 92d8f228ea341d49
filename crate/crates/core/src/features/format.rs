//! Binary feature file: `HGF1`, four little-endian u32 (frames, n_mels, hop,
//! sample rate), then f32 mel rows, f32 F0 and u8 voicing flags.

use std::path::Path;

use super::AcousticFeatures;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HGF1";
const HEADER_LEN: usize = 4 + 4 * 4;

pub fn encode_features(f: &AcousticFeatures) -> Result<Vec<u8>> {
    f.validate()?;
    let t = f.frames();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.mel.len() + 5 * t);
    out.extend_from_slice(MAGIC);
    for v in [t as u32, f.n_mels as u32, f.hop_samples as u32, f.sample_rate] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in f.mel.iter().chain(&f.f0_hz) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&f.uv);
    Ok(out)
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("feature file", reason)
}

pub fn decode_features(bytes: &[u8]) -> Result<AcousticFeatures> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, n_mels, hop, sr) = (word(0), word(1), word(2), word(3));
    if t == 0 {
        return Err(bad("zero frames"));
    }
    let expected = t
        .checked_mul(n_mels)
        .and_then(|m| m.checked_add(t))
        .and_then(|floats| floats.checked_mul(4))
        .and_then(|b| b.checked_add(t + HEADER_LEN))
        .ok_or_else(|| bad("header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {t} frames × {n_mels} mels, found {}",
            bytes.len()
        )));
    }
    let floats = |from: usize, n: usize| -> Vec<f32> {
        bytes[from..from + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let mel = floats(HEADER_LEN, t * n_mels);
    let f0_at = HEADER_LEN + 4 * t * n_mels;
    let f0_hz = floats(f0_at, t);
    let uv = bytes[f0_at + 4 * t..].to_vec();
    let feats = AcousticFeatures {
        mel,
        n_mels,
        f0_hz,
        uv,
        hop_samples: hop,
        sample_rate: sr as u32,
    };
    feats.validate()?;
    Ok(feats)
}

pub fn write_features(path: impl AsRef<Path>, f: &AcousticFeatures) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(f)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<AcousticFeatures> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}
