//! Finite-difference checks of the three trainable paths on miniature models.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::AcousticFeatures;
use crate::filter::{GeneratorConfig, GeneratorModel, SourceDraw, WaveNetConfig};
use crate::gan::{discriminator_loss, multi_stft_loss, DiscriminatorBank, DiscriminatorConfig};
use crate::numcore::gradcheck::{check_params, CheckOptions, LossFn, ParamCheck};
use crate::numcore::{Activation, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const CHECK_FFT_SIZES: [usize; 4] = [512, 256, 128, 64];
const CHECK_FRAMES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    Excitation,
    Filter,
    Gan,
}

impl CheckModule {
    pub const ALL: [CheckModule; 3] = [CheckModule::Excitation, CheckModule::Filter, CheckModule::Gan];

    pub fn name(self) -> &'static str {
        match self {
            CheckModule::Excitation => "excitation",
            CheckModule::Filter => "filter",
            CheckModule::Gan => "gan",
        }
    }
}

/// Parses a selector; `all` expands to every module.
pub fn parse_selector(s: &str) -> Result<Vec<CheckModule>> {
    if s == "all" {
        return Ok(CheckModule::ALL.to_vec());
    }
    s.parse().map(|m| vec![m])
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckModule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown module {s:?}; expected all, excitation, filter or gan")))
    }
}

#[derive(Clone, Debug)]
pub struct ModuleReport {
    pub module: CheckModule,
    pub num_parameters: usize,
    pub checks: Vec<ParamCheck>,
}

impl ModuleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(ParamCheck::passed)
    }
}

impl fmt::Display for ModuleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "[{}] {} ({} parameters)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.module.name(),
            self.num_parameters
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "  {:<4} {:<32} n={:<5} max_abs={:.3e} max_rel={:.3e}",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.numel,
                c.max_abs_err,
                c.max_rel_err
            )?;
        }
        Ok(())
    }
}

pub fn check_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        hop: 32,
        n_mels: 8,
        k_harmonics: 4,
        encoder_channels: 8,
        wavenet: WaveNetConfig {
            stacks: 1,
            layers_per_stack: 3,
            channels: 4,
            kernel: 3,
            dilation_base: 2,
            activation: Activation::Tanh,
        },
        ..GeneratorConfig::default()
    }
}

pub fn check_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        channels: vec![1, 2, 2, 2, 2],
        ..DiscriminatorConfig::default()
    }
}

/// Gliding voiced contour with two unvoiced frames, random log-mel.
fn check_features(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> AcousticFeatures {
    let f0_hz: Vec<f32> = (0..CHECK_FRAMES)
        .map(|t| if t == 9 || t == 10 { 0.0 } else { 150.0 + 4.0 * t as f32 })
        .collect();
    AcousticFeatures {
        mel: (0..CHECK_FRAMES * cfg.n_mels).map(|_| rng.random_range(-4.0..0.0)).collect(),
        n_mels: cfg.n_mels,
        uv: f0_hz.iter().map(|&f| u8::from(f > 0.0)).collect(),
        f0_hz,
        hop_samples: cfg.hop,
        sample_rate: cfg.sample_rate,
    }
}

fn lit<T: Real>(v: &[f32]) -> Tensor<T> {
    Tensor::from_vec(v.iter().map(|&x| T::lit(x as f64)).collect())
}

struct StftPath {
    model: GeneratorModel,
    feats: AcousticFeatures,
    draw: SourceDraw,
    target: Vec<f32>,
}

impl LossFn for StftPath {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<Var> {
        let model = GeneratorModel {
            store: store.clone(),
            ..self.model.clone()
        };
        let out = model.forward(g, &self.feats, &self.draw, true)?;
        let y = g.constant(lit(&self.target));
        multi_stft_loss(g, y, out.y_hat, out.o, &CHECK_FFT_SIZES)
    }
}

struct DiscPath {
    bank: DiscriminatorBank,
    real: Vec<f32>,
    fake: Vec<f32>,
}

impl LossFn for DiscPath {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<Var> {
        let bank = DiscriminatorBank {
            store: store.clone(),
            ..self.bank.clone()
        };
        let y = g.constant(lit(&self.real));
        let h = g.constant(lit(&self.fake));
        let real = bank.discriminate(g, y, true)?;
        let fake = bank.discriminate(g, h, true)?;
        discriminator_loss(g, &real, &fake)
    }
}

fn target_audio(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n)
        .map(|i| 0.5 * (i as f32 * 0.07).sin() + rng.random_range(-0.05..0.05))
        .collect()
}

/// Checks one module on the miniature configuration derived from `seed`.
pub fn gradcheck(module: CheckModule, seed: u64, opts: &CheckOptions) -> Result<ModuleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = check_generator_config();
    let model = GeneratorModel::new(&cfg, seed)?;
    let feats = check_features(&cfg, &mut rng);
    let n = feats.num_samples();
    let draw = SourceDraw::sample(&mut rng, cfg.k_harmonics, n);
    let target = target_audio(n, &mut rng);
    let (store, ids, checks) = match module {
        CheckModule::Excitation | CheckModule::Filter => {
            let ids: Vec<ParamId> = if module == CheckModule::Excitation {
                model.excitation_param_ids()
            } else {
                model.filter_param_ids()
            };
            let store = model.store.clone();
            let path = StftPath {
                model,
                feats,
                draw,
                target,
            };
            let checks = check_params(&path, &store, &ids, opts)?;
            (store, ids, checks)
        }
        CheckModule::Gan => {
            let fake = model.synthesize(&feats, &mut rng)?.y_hat;
            let bank = DiscriminatorBank::new(&check_discriminator_config(), seed)?;
            let store = bank.store.clone();
            let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
            let path = DiscPath {
                bank,
                real: target,
                fake,
            };
            let checks = check_params(&path, &store, &ids, opts)?;
            (store, ids, checks)
        }
    };
    Ok(ModuleReport {
        module,
        num_parameters: ids.iter().map(|&id| store.get(id).numel()).sum(),
        checks,
    })
}
