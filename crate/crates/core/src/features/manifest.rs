//! Tab-separated utterance list: id, audio path, feature path, frame count.
//! Relative paths resolve against the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::format::read_features;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub wav: PathBuf,
    pub features: PathBuf,
    pub frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.id, e.wav.display(), e.features.display(), e.frames);
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m = Self::new(root);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::format(
                    "manifest",
                    format!("line {}: expected 4 tab-separated fields, found {}", n + 1, cols.len()),
                ));
            }
            let frames = cols[3].trim().parse().map_err(|_| {
                Error::format("manifest", format!("line {}: bad frame count {:?}", n + 1, cols[3]))
            })?;
            m.entries.push(ManifestEntry {
                id: cols[0].to_string(),
                wav: PathBuf::from(cols[1]),
                features: PathBuf::from(cols[2]),
                frames,
            });
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Checks every referenced file exists and feature lengths match.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            let wav = self.resolve(&e.wav);
            if !wav.is_file() {
                return Err(Error::Dataset(format!("{}: missing audio {}", e.id, wav.display())));
            }
            let f = read_features(self.resolve(&e.features))?;
            if f.frames() != e.frames {
                return Err(Error::Dataset(format!(
                    "{}: manifest says {} frames, feature file has {}",
                    e.id,
                    e.frames,
                    f.frames()
                )));
            }
        }
        Ok(())
    }
}
