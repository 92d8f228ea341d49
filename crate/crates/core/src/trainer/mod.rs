//! Optimizer, two-phase training loop, checkpoints and the gradient-check
//! harness.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod radam;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::dataset::{Dataset, TrainingCrop};
use crate::features::manifest::DatasetManifest;
use crate::filter::{GeneratorConfig, GeneratorModel, SourceDraw};
use crate::gan::{
    adversarial_loss, discriminator_loss, feature_matching_loss, generator_loss, multi_stft_loss, DiscriminatorBank,
    DiscriminatorConfig, LossWeights,
};
use crate::numcore::{Graph, ParamGrads, ParamStore, ParamTensor, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use config::{apply_known, parse_key_values, KeyValueConfig};
pub use radam::{radam_step, RAdamConfig, RAdamState};

pub const METRICS_HEADER: &str = "step,L_stft,L_adv,L_fm,L_G,L_D,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.hgck";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.hgck";
/// Mixed into the run seed for the discriminator created at the phase switch.
const DISC_SEED_SALT: u64 = 0xD15C_0000_0000_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Crop length in samples; must be a multiple of the hop.
    pub crop: usize,
    pub pretrain_steps: u64,
    pub total_steps: u64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub loss: LossWeights,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            crop: 11_000,
            pretrain_steps: 100_000,
            total_steps: 500_000,
            lr_gen: 1e-4,
            lr_disc: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            seed: 0,
            checkpoint_every: 10_000,
            loss: LossWeights::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule: 2000 pretraining steps then 500 adversarial ones.
    pub fn toy() -> Self {
        Self {
            batch_size: 4,
            pretrain_steps: 2000,
            total_steps: 2500,
            checkpoint_every: 500,
            discriminator: DiscriminatorConfig::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("batch size and crop must be positive".into()));
        }
        if self.pretrain_steps > self.total_steps {
            return Err(Error::Config(format!(
                "pretrain_steps {} exceeds total_steps {}",
                self.pretrain_steps, self.total_steps
            )));
        }
        if self.loss.fft_sizes.is_empty() || self.loss.fft_sizes.iter().any(|&n| n < 4) {
            return Err(Error::Config(format!("bad FFT sizes {:?}", self.loss.fft_sizes)));
        }
        if let Some(&n) = self.loss.fft_sizes.iter().find(|&&n| self.crop <= n / 2) {
            return Err(Error::Config(format!("crop {} is too short for FFT size {n}", self.crop)));
        }
        if self.pretrain_steps < self.total_steps && self.crop < self.discriminator.min_input_len() {
            return Err(Error::Config(format!(
                "crop {} is shorter than the discriminator minimum {}",
                self.crop,
                self.discriminator.min_input_len()
            )));
        }
        self.gen_optimizer().validate()?;
        self.disc_optimizer().validate()?;
        self.discriminator.validate()
    }

    pub fn gen_optimizer(&self) -> RAdamConfig {
        RAdamConfig {
            lr: self.lr_gen,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn disc_optimizer(&self) -> RAdamConfig {
        RAdamConfig {
            lr: self.lr_disc,
            ..self.gen_optimizer()
        }
    }
}

/// Batch-mean losses of one step. Adversarial terms are `None` during
/// pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub l_stft: f64,
    pub l_adv: Option<f64>,
    pub l_fm: Option<f64>,
    pub l_g: f64,
    pub l_d: Option<f64>,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.step,
            self.l_stft,
            opt(self.l_adv),
            opt(self.l_fm),
            self.l_g,
            opt(self.l_d),
            self.wall_ms
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::format("metrics", format!("expected 7 columns in {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format("metrics", format!("bad number {s:?}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            step: f[0].parse().map_err(|_| Error::format("metrics", format!("bad step {:?}", f[0])))?,
            l_stft: num(f[1])?,
            l_adv: opt(f[2])?,
            l_fm: opt(f[3])?,
            l_g: num(f[4])?,
            l_d: opt(f[5])?,
            wall_ms: num(f[6])?,
        })
    }

    fn losses(&self) -> impl Iterator<Item = f64> {
        [Some(self.l_stft), self.l_adv, self.l_fm, Some(self.l_g), self.l_d]
            .into_iter()
            .flatten()
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics", format!("{}: unexpected header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(StepMetrics::parse_csv_row).collect()
}

/// Per-step generator: every random draw of step `t` comes from stream `t`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

struct CropGrads {
    losses: [f64; 4],
    grads: ParamGrads<f32>,
}

fn crop_audio(g: &mut Graph<f32>, crop: &TrainingCrop) -> crate::numcore::Var {
    g.constant(Tensor::from_vec(crop.audio.clone()))
}

fn finite_or_abort(what: &str, step: u64, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at step {step}")))
    }
}

fn accumulate_mean(store: &mut ParamStore, parts: &[CropGrads]) -> Result<()> {
    store.zero_grad();
    for p in parts {
        store.accumulate(&p.grads)?;
    }
    let scale = 1.0 / parts.len() as f32;
    for p in store.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(())
}

fn mean_of(parts: &[CropGrads], i: usize) -> f64 {
    parts.iter().map(|p| p.losses[i]).sum::<f64>() / parts.len() as f64
}

/// All mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: GeneratorModel,
    pub discriminator: Option<DiscriminatorBank>,
    pub opt_gen: RAdamState,
    pub opt_disc: Option<RAdamState>,
    /// Completed steps; the next step has this index.
    pub step: u64,
}

impl Trainer {
    pub fn new(gen_cfg: &GeneratorConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = GeneratorModel::new(gen_cfg, cfg.seed)?;
        let opt_gen = RAdamState::for_store(&generator.store);
        Ok(Self {
            cfg: cfg.clone(),
            generator,
            discriminator: None,
            opt_gen,
            opt_disc: None,
            step: 0,
        })
    }

    pub fn in_pretraining(&self) -> bool {
        self.step < self.cfg.pretrain_steps
    }

    fn generator_pass(
        &self,
        crop: &TrainingCrop,
        draw: &SourceDraw,
        disc: Option<&DiscriminatorBank>,
    ) -> Result<CropGrads> {
        let mut g = Graph::<f32>::new();
        let out = self.generator.forward(&mut g, &crop.features, draw, true)?;
        let y = crop_audio(&mut g, crop);
        let l_stft = multi_stft_loss(&mut g, y, out.y_hat, out.o, &self.cfg.loss.fft_sizes)?;
        let (loss, losses) = match disc {
            None => (l_stft, [g.scalar(l_stft) as f64, 0.0, 0.0, 0.0]),
            Some(d) => {
                let real = d.discriminate(&mut g, y, false)?;
                let fake = d.discriminate(&mut g, out.y_hat, false)?;
                let adv = adversarial_loss(&mut g, &fake)?;
                let fm = feature_matching_loss(&mut g, &real, &fake)?;
                let total = generator_loss(&mut g, l_stft, adv, fm, &self.cfg.loss)?;
                let v = |v| g.scalar(v) as f64;
                (total, [v(l_stft), v(adv), v(fm), v(total)])
            }
        };
        let grads = g.backward(loss)?;
        Ok(CropGrads { losses, grads })
    }

    fn discriminator_pass(&self, d: &DiscriminatorBank, crop: &TrainingCrop, draw: &SourceDraw) -> Result<CropGrads> {
        let y_hat = {
            let mut g = Graph::<f32>::inference();
            let out = self.generator.forward(&mut g, &crop.features, draw, false)?;
            g.data(out.y_hat).to_vec()
        };
        let mut g = Graph::<f32>::new();
        let y = crop_audio(&mut g, crop);
        let fake = g.constant(Tensor::from_vec(y_hat));
        let real = d.discriminate(&mut g, y, true)?;
        let fake = d.discriminate(&mut g, fake, true)?;
        let l = discriminator_loss(&mut g, &real, &fake)?;
        let value = g.scalar(l) as f64;
        let grads = g.backward(l)?;
        Ok(CropGrads {
            losses: [value, 0.0, 0.0, 0.0],
            grads,
        })
    }

    /// Runs one step. On error the state is left exactly as before the call.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.step;
        if data.crop_samples != self.cfg.crop {
            return Err(Error::Config(format!(
                "dataset crops are {} samples, training expects {}",
                data.crop_samples, self.cfg.crop
            )));
        }
        let mut rng = step_rng(self.cfg.seed, step);
        let batch = data.sample_batch(&mut rng, self.cfg.batch_size)?;
        let k = self.generator.cfg.k_harmonics;
        let draws: Vec<SourceDraw> = batch
            .iter()
            .map(|c| SourceDraw::sample(&mut rng, k, c.audio.len()))
            .collect();

        if self.in_pretraining() {
            let parts = batch
                .par_iter()
                .zip(&draws)
                .map(|(c, d)| self.generator_pass(c, d, None))
                .collect::<Result<Vec<_>>>()?;
            let l_stft = mean_of(&parts, 0);
            finite_or_abort("L_stft", step, l_stft)?;
            let mut gen = self.generator.store.clone();
            let mut opt = self.opt_gen.clone();
            accumulate_mean(&mut gen, &parts)?;
            radam_step(&mut gen, &mut opt, &self.cfg.gen_optimizer())?;
            self.generator.store = gen;
            self.opt_gen = opt;
            self.step += 1;
            return Ok(StepMetrics {
                step,
                l_stft,
                l_adv: None,
                l_fm: None,
                l_g: l_stft,
                l_d: None,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }

        let mut disc = match &self.discriminator {
            Some(d) => d.clone(),
            None => DiscriminatorBank::new(&self.cfg.discriminator, self.cfg.seed ^ DISC_SEED_SALT)?,
        };
        let mut opt_d = self.opt_disc.clone().unwrap_or_else(|| RAdamState::for_store(&disc.store));
        let parts = batch
            .par_iter()
            .zip(&draws)
            .map(|(c, dr)| self.discriminator_pass(&disc, c, dr))
            .collect::<Result<Vec<_>>>()?;
        let l_d = mean_of(&parts, 0);
        finite_or_abort("L_D", step, l_d)?;
        accumulate_mean(&mut disc.store, &parts)?;
        radam_step(&mut disc.store, &mut opt_d, &self.cfg.disc_optimizer())?;

        let parts = batch
            .par_iter()
            .zip(&draws)
            .map(|(c, dr)| self.generator_pass(c, dr, Some(&disc)))
            .collect::<Result<Vec<_>>>()?;
        let m: Vec<f64> = (0..4).map(|i| mean_of(&parts, i)).collect();
        finite_or_abort("L_G", step, m[3])?;
        let mut gen = self.generator.store.clone();
        let mut opt = self.opt_gen.clone();
        accumulate_mean(&mut gen, &parts)?;
        radam_step(&mut gen, &mut opt, &self.cfg.gen_optimizer())?;

        self.generator.store = gen;
        self.opt_gen = opt;
        self.discriminator = Some(disc);
        self.opt_disc = Some(opt_d);
        self.step += 1;
        Ok(StepMetrics {
            step,
            l_stft: m[0],
            l_adv: Some(m[1]),
            l_fm: Some(m[2]),
            l_g: m[3],
            l_d: Some(l_d),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let mut meta = |k: &str, v: String| {
            ckpt.meta.insert(k.to_string(), v);
        };
        meta("step", self.step.to_string());
        meta("optimizer.gen.t", self.opt_gen.t.to_string());
        if let Some(o) = &self.opt_disc {
            meta("optimizer.disc.t", o.t.to_string());
        }
        for (k, v) in self.generator.cfg.pairs().into_iter().chain(self.cfg.pairs()) {
            meta(&k, v);
        }
        push_store(&mut ckpt, "gen", &self.generator.store, &self.opt_gen);
        if let (Some(d), Some(o)) = (&self.discriminator, &self.opt_disc) {
            push_store(&mut ckpt, "disc", &d.store, o);
        }
        ckpt
    }

    /// Rebuilds the full state from a checkpoint, validating every tensor.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (gen_cfg, cfg) = checkpoint_configs(ckpt)?;
        cfg.validate()?;
        let step = parse_meta::<u64>(ckpt, "step")?;
        let template = GeneratorModel::new(&gen_cfg, 0)?;
        let (store, mut opt_gen) = pull_store(ckpt, "gen", &template.store)?;
        opt_gen.t = parse_meta(ckpt, "optimizer.gen.t")?;
        let generator = GeneratorModel::from_store(&gen_cfg, store)?;
        let has_disc = ckpt.tensors.iter().any(|t| t.name.starts_with("disc/"));
        let (discriminator, opt_disc) = if has_disc {
            let template = DiscriminatorBank::new(&cfg.discriminator, 0)?;
            let (store, mut opt) = pull_store(ckpt, "disc", &template.store)?;
            opt.t = parse_meta(ckpt, "optimizer.disc.t")?;
            (Some(DiscriminatorBank::from_store(&cfg.discriminator, store)?), Some(opt))
        } else {
            (None, None)
        };
        let expected = ckpt.tensors.len();
        let used = 3 * generator.store.len() + discriminator.as_ref().map_or(0, |d| 3 * d.store.len());
        if expected != used {
            return Err(Error::format(
                "checkpoint",
                format!("{expected} tensors stored, {used} expected for this config"),
            ));
        }
        Ok(Self {
            cfg,
            generator,
            discriminator,
            opt_gen,
            opt_disc,
            step,
        })
    }
}

fn push_store(ckpt: &mut Checkpoint, prefix: &str, store: &ParamStore, opt: &RAdamState) {
    for (id, p) in store.iter() {
        for (kind, data) in [("", &p.data), ("m.", &opt.m[id.0]), ("v.", &opt.v[id.0])] {
            ckpt.tensors.push(NamedTensor {
                name: format!("{prefix}/{kind}{}", p.name),
                shape: p.shape.clone(),
                data: data.clone(),
            });
        }
    }
}

fn pull_store(ckpt: &Checkpoint, prefix: &str, template: &ParamStore) -> Result<(ParamStore, RAdamState)> {
    let mut store = ParamStore::new();
    let mut opt = RAdamState::for_store(template);
    for (id, p) in template.iter() {
        let fetch = |kind: &str| -> Result<&NamedTensor> {
            let name = format!("{prefix}/{kind}{}", p.name);
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} missing")))?;
            if t.shape != p.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {name} has shape {:?}, config implies {:?}", t.shape, p.shape),
                ));
            }
            Ok(t)
        };
        store.insert(ParamTensor::new(p.name.clone(), p.shape.clone(), fetch("")?.data.clone())?)?;
        opt.m[id.0] = fetch("m.")?.data.clone();
        opt.v[id.0] = fetch("v.")?.data.clone();
    }
    Ok((store, opt))
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    let v = ckpt.meta(key)?;
    v.parse()
        .map_err(|_| Error::format("checkpoint", format!("header {key}={v:?} is malformed")))
}

/// Generator and training configs recorded in a checkpoint header.
pub fn checkpoint_configs(ckpt: &Checkpoint) -> Result<(GeneratorConfig, TrainConfig)> {
    let mut gen = GeneratorConfig::default();
    let mut train = TrainConfig::default();
    for (k, v) in &ckpt.meta {
        let known = gen.set(k, v)? || train.set(k, v)? || matches!(k.as_str(), "step" | "optimizer.gen.t" | "optimizer.disc.t");
        if !known {
            return Err(Error::format("checkpoint", format!("unknown header key {k}")));
        }
    }
    gen.validate()?;
    Ok((gen, train))
}

/// Checkpoint and metric destinations for [`Trainer::run`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub checkpoint_every: u64,
}

impl RunOutputs {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:08}.hgck"))
    }

    /// Opens the metric log for appending after `step`, discarding any rows at
    /// or beyond it left by an interrupted run.
    fn open_metrics(&self, step: u64) -> Result<fs::File> {
        let path = self.metrics_path();
        let mut keep = Vec::new();
        if step > 0 && path.exists() {
            keep = read_metrics(&path)?.into_iter().filter(|m| m.step < step).collect();
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut text = format!("{METRICS_HEADER}\n");
        for m in keep {
            text.push_str(&m.csv_row());
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(f)
    }
}

impl Trainer {
    /// Trains until `until` completed steps, calling `observe` after each.
    /// With `outputs`, metrics are streamed to CSV and checkpoints are written
    /// periodically and at the end. A non-finite loss stops the run after
    /// saving the last good state.
    pub fn run<F: FnMut(&StepMetrics)>(
        &mut self,
        data: &Dataset,
        until: u64,
        outputs: Option<&RunOutputs>,
        mut observe: F,
    ) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut log = match outputs {
            Some(o) => {
                fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
                Some(o.open_metrics(self.step)?)
            }
            None => None,
        };
        while self.step < until {
            let m = match self.train_step(data) {
                Ok(m) => m,
                Err(e) => {
                    if let (Error::NonFinite(_), Some(o)) = (&e, outputs) {
                        save_checkpoint(o.dir.join(LAST_GOOD_CHECKPOINT), &self.to_checkpoint())?;
                    }
                    return Err(e);
                }
            };
            if let Some(bad) = m.losses().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("loss {bad} at step {}", m.step)));
            }
            if let (Some(f), Some(o)) = (log.as_mut(), outputs) {
                writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(o.metrics_path(), e))?;
            }
            if m.step % 100 == 0 {
                info!("step {} L_stft {:.4} L_G {:.4} L_D {:?}", m.step, m.l_stft, m.l_g, m.l_d);
            }
            observe(&m);
            if let Some(o) = outputs {
                let periodic = o.checkpoint_every > 0 && self.step.is_multiple_of(o.checkpoint_every);
                if periodic || self.step == until {
                    let ckpt = self.to_checkpoint();
                    let path = o.checkpoint_path(self.step);
                    save_checkpoint(&path, &ckpt)?;
                    save_checkpoint(o.dir.join(LATEST_CHECKPOINT), &ckpt)?;
                    written.push(path);
                }
            }
        }
        Ok(written)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub final_step: u64,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
}

/// Loads the manifest's dataset and trains to `cfg.total_steps`, optionally
/// resuming from a checkpoint whose model configuration must match.
pub fn train(
    manifest: &DatasetManifest,
    gen_cfg: &GeneratorConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            if t.generator.cfg != *gen_cfg {
                return Err(Error::Config(format!(
                    "checkpoint generator config {:?} differs from {:?}",
                    t.generator.cfg, gen_cfg
                )));
            }
            if t.cfg.discriminator != cfg.discriminator || t.cfg.seed != cfg.seed {
                return Err(Error::Config("checkpoint discriminator config or seed differs from the run config".into()));
            }
            t.cfg = cfg.clone();
            t
        }
        None => Trainer::new(gen_cfg, cfg)?,
    };
    let data = Dataset::load(manifest, cfg.crop, gen_cfg.hop)?;
    let outputs = RunOutputs {
        dir: out_dir.to_path_buf(),
        checkpoint_every: cfg.checkpoint_every,
    };
    let checkpoints = trainer.run(&data, cfg.total_steps, Some(&outputs), |_| {})?;
    Ok(TrainReport {
        final_step: trainer.step,
        checkpoints,
        metrics: outputs.metrics_path(),
    })
}
