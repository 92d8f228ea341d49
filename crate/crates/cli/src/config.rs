use std::path::{Path, PathBuf};

use hooligan::features::FeatureConfig;
use hooligan::filter::GeneratorConfig;
use hooligan::trainer::{parse_key_values, KeyValueConfig, TrainConfig};
use hooligan::{Error, Result};

/// Everything a run needs, read from `key=value` lines. Keys not listed here
/// or in the generator / training sections are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub win: usize,
    pub fft: usize,
    pub data: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let f = FeatureConfig::default();
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            win: f.win,
            fft: f.fft,
            data: None,
            features: None,
            checkpoints: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_key_values(text)? {
            if cfg.generator.set(&k, &v)? || cfg.train.set(&k, &v)? {
                continue;
            }
            match k.as_str() {
                "win" => cfg.win = parse(&k, &v)?,
                "fft" => cfg.fft = parse(&k, &v)?,
                "paths.data" => cfg.data = Some(v.into()),
                "paths.features" => cfg.features = Some(v.into()),
                "paths.checkpoints" => cfg.checkpoints = Some(v.into()),
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        cfg.generator.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            sample_rate: self.generator.sample_rate,
            hop: self.generator.hop,
            win: self.win,
            fft: self.fft,
            n_mels: self.generator.n_mels,
            ..FeatureConfig::default()
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}
