//! `key=value` encoding shared by run-config files and checkpoint headers.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::filter::GeneratorConfig;
use crate::gan::{DiscriminatorConfig, LossWeights};
use crate::numcore::Activation;

use super::TrainConfig;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse_value(key, s.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// A config section addressable by flat keys.
pub trait KeyValueConfig {
    /// Applies one key; `Ok(false)` when the key belongs to another section.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    fn pairs(&self) -> Vec<(String, String)>;
}

impl KeyValueConfig for GeneratorConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let w = &mut self.wavenet;
        match key {
            "sample_rate" => self.sample_rate = parse_value(key, value)?,
            "hop" => self.hop = parse_value(key, value)?,
            "n_mels" => self.n_mels = parse_value(key, value)?,
            "k_harmonics" => self.k_harmonics = parse_value(key, value)?,
            "encoder_channels" => self.encoder_channels = parse_value(key, value)?,
            "wavenet.stacks" => w.stacks = parse_value(key, value)?,
            "wavenet.layers" => w.layers_per_stack = parse_value(key, value)?,
            "wavenet.channels" => w.channels = parse_value(key, value)?,
            "wavenet.kernel" => w.kernel = parse_value(key, value)?,
            "wavenet.dilation_base" => w.dilation_base = parse_value(key, value)?,
            "wavenet.activation" => {
                w.activation = Activation::from_name(value)
                    .ok_or_else(|| Error::Config(format!("{key}: unknown activation {value:?}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let w = &self.wavenet;
        [
            ("sample_rate", self.sample_rate.to_string()),
            ("hop", self.hop.to_string()),
            ("n_mels", self.n_mels.to_string()),
            ("k_harmonics", self.k_harmonics.to_string()),
            ("encoder_channels", self.encoder_channels.to_string()),
            ("wavenet.stacks", w.stacks.to_string()),
            ("wavenet.layers", w.layers_per_stack.to_string()),
            ("wavenet.channels", w.channels.to_string()),
            ("wavenet.kernel", w.kernel.to_string()),
            ("wavenet.dilation_base", w.dilation_base.to_string()),
            ("wavenet.activation", w.activation.name().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

impl KeyValueConfig for DiscriminatorConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "disc.scales" => self.scales = parse_value(key, value)?,
            "disc.channels" => self.channels = parse_list(key, value)?,
            "disc.input_kernel" => self.input_kernel = parse_value(key, value)?,
            "disc.down_kernel" => self.down_kernel = parse_value(key, value)?,
            "disc.down_stride" => self.down_stride = parse_value(key, value)?,
            "disc.post_kernel" => self.post_kernel = parse_value(key, value)?,
            "disc.output_kernel" => self.output_kernel = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        [
            ("disc.scales", self.scales.to_string()),
            ("disc.channels", join(&self.channels)),
            ("disc.input_kernel", self.input_kernel.to_string()),
            ("disc.down_kernel", self.down_kernel.to_string()),
            ("disc.down_stride", self.down_stride.to_string()),
            ("disc.post_kernel", self.post_kernel.to_string()),
            ("disc.output_kernel", self.output_kernel.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

impl KeyValueConfig for LossWeights {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "loss.tau" => self.tau = parse_value(key, value)?,
            "loss.lambda" => self.lambda = parse_value(key, value)?,
            "loss.fft_sizes" => self.fft_sizes = parse_list(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("loss.tau".into(), self.tau.to_string()),
            ("loss.lambda".into(), self.lambda.to_string()),
            ("loss.fft_sizes".into(), join(&self.fft_sizes)),
        ]
    }
}

impl KeyValueConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.batch" => self.batch_size = parse_value(key, value)?,
            "train.crop" => self.crop = parse_value(key, value)?,
            "train.pretrain_steps" => self.pretrain_steps = parse_value(key, value)?,
            "train.total_steps" => self.total_steps = parse_value(key, value)?,
            "train.lr_gen" => self.lr_gen = parse_value(key, value)?,
            "train.lr_disc" => self.lr_disc = parse_value(key, value)?,
            "train.beta1" => self.beta1 = parse_value(key, value)?,
            "train.beta2" => self.beta2 = parse_value(key, value)?,
            "train.eps" => self.eps = parse_value(key, value)?,
            "train.seed" => self.seed = parse_value(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Ok(self.loss.set(key, value)? || self.discriminator.set(key, value)?),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = [
            ("train.batch", self.batch_size.to_string()),
            ("train.crop", self.crop.to_string()),
            ("train.pretrain_steps", self.pretrain_steps.to_string()),
            ("train.total_steps", self.total_steps.to_string()),
            ("train.lr_gen", self.lr_gen.to_string()),
            ("train.lr_disc", self.lr_disc.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.eps", self.eps.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        v.extend(self.loss.pairs());
        v.extend(self.discriminator.pairs());
        v
    }
}

/// Applies every entry of `map` that `cfg` recognises; returns the rest.
pub fn apply_known<C: KeyValueConfig>(cfg: &mut C, map: &BTreeMap<String, String>) -> Result<Vec<String>> {
    let mut rest = Vec::new();
    for (k, v) in map {
        if !cfg.set(k, v)? {
            rest.push(k.clone());
        }
    }
    Ok(rest)
}
