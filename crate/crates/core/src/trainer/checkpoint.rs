//! HGCK checkpoint container: magic, version, a text header holding
//! `key=value` metadata and the tensor directory, a little-endian `f32`
//! payload, and a trailing FNV-1a digest over every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(KIND, format!("missing header key {key}")))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::invalid(format!("{what} {s:?} must be non-empty without spaces or '='")));
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = String::new();
    for (k, v) in &ckpt.meta {
        check_token("header key", k)?;
        if v.contains('\n') {
            return Err(Error::invalid(format!("header value for {k} contains a newline")));
        }
        header.push_str(&format!("{k}={v}\n"));
    }
    let mut offset = 0usize;
    for t in &ckpt.tensors {
        check_token("tensor name", &t.name)?;
        let n: usize = t.shape.iter().product();
        if n != t.data.len() {
            return Err(Error::shape(format!("tensor {}: shape {:?} vs {} values", t.name, t.shape, t.data.len())));
        }
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let bytes = 4 * n;
        header.push_str(&format!("tensor {} {} {offset} {bytes}\n", t.name, shape.join(",")));
        offset += bytes;
    }
    let mut out = Vec::with_capacity(12 + header.len() + offset + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in &ckpt.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 {
        return Err(Error::format(KIND, format!("{} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(KIND, "bad magic"));
    }
    let version = u32_at(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            KIND,
            format!("version {version} is not supported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(Error::format(
            KIND,
            format!("digest mismatch: stored {stored:016x}, computed {actual:016x}"),
        ));
    }
    let header_len = u32_at(bytes, 8) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::format(KIND, "header runs past the end of the file"))?;
    let header = std::str::from_utf8(&body[12..header_end]).map_err(|e| Error::format(KIND, e.to_string()))?;
    let payload = &body[header_end..];

    let mut ckpt = Checkpoint::default();
    let mut expected_offset = 0usize;
    for line in header.lines() {
        if let Some(entry) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = entry.split(' ').collect();
            if f.len() != 4 {
                return Err(Error::format(KIND, format!("bad tensor entry {line:?}")));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(KIND, format!("bad number in {line:?}")));
            let shape = if f[1].is_empty() {
                vec![]
            } else {
                f[1].split(',').map(parse).collect::<Result<Vec<_>>>()?
            };
            let (offset, len) = (parse(f[2])?, parse(f[3])?);
            let n: usize = shape.iter().product();
            if offset != expected_offset || len != 4 * n || offset + len > payload.len() {
                return Err(Error::format(KIND, format!("inconsistent tensor entry {line:?}")));
            }
            expected_offset += len;
            let data = payload[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.tensors.push(NamedTensor {
                name: f[0].to_string(),
                shape,
                data,
            });
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(KIND, format!("bad header line {line:?}")))?;
            if ckpt.meta.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::format(KIND, format!("duplicate header key {k}")));
            }
        }
    }
    if expected_offset != payload.len() {
        return Err(Error::format(
            KIND,
            format!("payload has {} bytes, directory covers {expected_offset}", payload.len()),
        ));
    }
    Ok(ckpt)
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("hgck.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { kind, reason } => Error::Format {
            kind,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}
