//! Multi-scale discriminators and the training objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::excitation::find;
use crate::numcore::{Activation, ConvSpec, Graph, Init, ParamId, ParamStore, Real, Var};

/// Magnitudes are floored here before taking logs.
pub const LOG_MAG_FLOOR: f64 = 1e-7;
pub const DEFAULT_FFT_SIZES: [usize; 6] = [2048, 1024, 512, 256, 128, 64];
pub const POOL_KERNEL: usize = 4;
pub const POOL_STRIDE: usize = 2;
pub const POOL_PAD: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda: f64,
    pub fft_sizes: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 4.0,
            lambda: 25.0,
            fft_sizes: DEFAULT_FFT_SIZES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub scales: usize,
    /// Width after the input convolution, then after each strided stage.
    pub channels: Vec<usize>,
    pub input_kernel: usize,
    pub down_kernel: usize,
    pub down_stride: usize,
    pub post_kernel: usize,
    pub output_kernel: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            channels: vec![16, 64, 256, 1024, 1024],
            input_kernel: 15,
            down_kernel: 41,
            down_stride: 4,
            post_kernel: 5,
            output_kernel: 3,
        }
    }
}

impl DiscriminatorConfig {
    /// Every width divided by `divisor` (at least one channel).
    pub fn scaled(divisor: usize) -> Self {
        let d = Self::default();
        Self {
            channels: d.channels.iter().map(|&c| (c / divisor.max(1)).max(1)).collect(),
            ..d
        }
    }

    pub fn toy() -> Self {
        Self::scaled(16)
    }

    /// Grouped convolutions keep four input channels per group.
    pub fn groups(in_channels: usize) -> usize {
        (in_channels / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config(format!("degenerate discriminator: {self:?}")));
        }
        for k in [self.input_kernel, self.down_kernel, self.post_kernel, self.output_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("discriminator kernels must be odd, got {k}")));
            }
        }
        for w in self.channels.windows(2) {
            let g = Self::groups(w[0]);
            if w[0] % g != 0 || w[1] % g != 0 {
                return Err(Error::Config(format!(
                    "strided stage {} → {} cannot use {g} groups",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Activation maps per scale: the input conv, each strided stage and the
    /// post conv, followed by the output map.
    pub fn layers_per_scale(&self) -> usize {
        self.channels.len() + 2
    }

    /// Shortest accepted input: the coarsest scale must still see one full
    /// stride of every strided stage.
    pub fn min_input_len(&self) -> usize {
        let down = self.down_stride.pow((self.channels.len() - 1) as u32);
        down << (self.scales - 1)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DLayer {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

#[derive(Clone, Debug)]
pub struct ScaleOutput {
    /// Intermediate activations, each `[C×T']`.
    pub features: Vec<Var>,
    /// Final single-channel map `[1×T']`.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorBank {
    pub cfg: DiscriminatorConfig,
    pub store: ParamStore,
    pub(crate) scales: Vec<Vec<DLayer>>,
}

fn layer_shapes(cfg: &DiscriminatorConfig) -> Vec<(usize, usize, usize, ConvSpec)> {
    let c = &cfg.channels;
    let mut v = vec![(c[0], 1, cfg.input_kernel, ConvSpec::same())];
    for w in c.windows(2) {
        let g = DiscriminatorConfig::groups(w[0]);
        v.push((w[1], w[0] / g, cfg.down_kernel, ConvSpec::strided(cfg.down_stride, g)));
    }
    let last = *c.last().unwrap();
    v.push((last, last, cfg.post_kernel, ConvSpec::same()));
    v.push((1, last, cfg.output_kernel, ConvSpec::same()));
    v
}

impl DiscriminatorBank {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut scales = Vec::with_capacity(cfg.scales);
        for s in 0..cfg.scales {
            let mut layers = Vec::new();
            for (l, (c_out, c_in_g, k, spec)) in layer_shapes(cfg).into_iter().enumerate() {
                let init = Init::fan_in(c_in_g * k);
                layers.push(DLayer {
                    w: store.add(format!("d{s}.conv{l}.weight"), vec![c_out, c_in_g, k], init, &mut rng)?,
                    b: store.add(format!("d{s}.conv{l}.bias"), vec![c_out], init, &mut rng)?,
                    spec,
                });
            }
            scales.push(layers);
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            scales,
        })
    }

    /// Adopts loaded parameters after checking names and shapes.
    pub fn from_store(cfg: &DiscriminatorConfig, loaded: ParamStore) -> Result<Self> {
        let mut bank = Self::new(cfg, 0)?;
        if loaded.len() != bank.store.len() {
            return Err(Error::Config(format!(
                "expected {} discriminator tensors, found {}",
                bank.store.len(),
                loaded.len()
            )));
        }
        for p in bank.store.iter_mut() {
            let id = find(&loaded, &p.name)?;
            let src = loaded.get(id);
            if src.shape != p.shape {
                return Err(Error::Config(format!(
                    "discriminator tensor {} has shape {:?}, config implies {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            p.data.copy_from_slice(&src.data);
        }
        Ok(bank)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// `[1×T]` input for each scale; each is the average-pooled previous one.
    pub fn scale_inputs<T: Real>(&self, g: &mut Graph<T>, audio: Var) -> Result<Vec<Var>> {
        let n: usize = g.shape(audio).iter().product();
        if n < self.cfg.min_input_len() {
            return Err(Error::invalid(format!(
                "discriminator input of {n} samples is shorter than the minimum {}",
                self.cfg.min_input_len()
            )));
        }
        let mut x = g.reshape(audio, vec![1, n])?;
        let mut out = vec![x];
        for _ in 1..self.cfg.scales {
            x = g.avg_pool(x, POOL_KERNEL, POOL_STRIDE, POOL_PAD)?;
            out.push(x);
        }
        Ok(out)
    }

    /// Per-scale activations. `train = false` binds parameters as constants.
    pub fn discriminate<T: Real>(
        &self,
        g: &mut Graph<T>,
        audio: Var,
        train: bool,
    ) -> Result<Vec<ScaleOutput>> {
        let inputs = self.scale_inputs(g, audio)?;
        let mut outs = Vec::with_capacity(inputs.len());
        for (layers, input) in self.scales.iter().zip(inputs) {
            let mut x = input;
            let mut features = Vec::with_capacity(layers.len() - 1);
            for (i, layer) in layers.iter().enumerate() {
                let w = g.bind(&self.store, layer.w, train);
                let b = g.bind(&self.store, layer.b, train);
                x = g.conv1d(x, w, Some(b), layer.spec)?;
                if i + 1 < layers.len() {
                    x = g.activation(x, Activation::LeakyRelu);
                    features.push(x);
                }
            }
            outs.push(ScaleOutput { features, output: x });
        }
        Ok(outs)
    }
}

/// Mean over FFT sizes of the L1 magnitude and L1 log-magnitude distances;
/// hop is a quarter of each size.
pub fn l_mag<T: Real>(g: &mut Graph<T>, y: Var, y_hat: Var, fft_sizes: &[usize]) -> Result<Var> {
    let (ny, nh) = (g.shape(y).iter().product::<usize>(), g.shape(y_hat).iter().product::<usize>());
    if ny != nh {
        return Err(Error::shape(format!("l_mag length mismatch: {ny} vs {nh}")));
    }
    if fft_sizes.is_empty() {
        return Err(Error::invalid("l_mag needs at least one FFT size"));
    }
    let mut total: Option<Var> = None;
    for &n in fft_sizes {
        let sy = g.stft_magnitude(y, n, n / 4)?;
        let sh = g.stft_magnitude(y_hat, n, n / 4)?;
        let d = g.sub(sy, sh)?;
        let d = g.abs(d);
        let lin = g.mean(d);
        let ly = g.log_floor(sy, LOG_MAG_FLOOR);
        let lh = g.log_floor(sh, LOG_MAG_FLOOR);
        let d = g.sub(ly, lh)?;
        let d = g.abs(d);
        let log = g.mean(d);
        let term = g.add(lin, log)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / fft_sizes.len() as f64))
}

/// `l_mag(y, o) + l_mag(y, ŷ)`.
pub fn multi_stft_loss<T: Real>(g: &mut Graph<T>, y: Var, y_hat: Var, o: Var, fft_sizes: &[usize]) -> Result<Var> {
    let a = l_mag(g, y, o, fft_sizes)?;
    let b = l_mag(g, y, y_hat, fft_sizes)?;
    g.add(a, b)
}

fn mean_of<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::invalid("no discriminator scales"));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

fn mse_to<T: Real>(g: &mut Graph<T>, x: Var, target: f64) -> Var {
    let d = g.add_scalar(x, -target);
    let d = g.square(d);
    g.mean(d)
}

/// Scale-averaged `mean((1 − D(ŷ))²)`.
pub fn adversarial_loss<T: Real>(g: &mut Graph<T>, fake: &[ScaleOutput]) -> Result<Var> {
    let terms: Vec<Var> = fake.iter().map(|s| mse_to(g, s.output, 1.0)).collect();
    mean_of(g, &terms)
}

/// Mean over scales and layers of the mean absolute activation difference.
pub fn feature_matching_loss<T: Real>(g: &mut Graph<T>, real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::shape(format!("{} real scales vs {} fake", real.len(), fake.len())));
    }
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        if r.features.len() != f.features.len() {
            return Err(Error::shape(format!(
                "{} real layers vs {} fake",
                r.features.len(),
                f.features.len()
            )));
        }
        for (&a, &b) in r.features.iter().zip(&f.features) {
            if g.shape(a) != g.shape(b) {
                return Err(Error::shape(format!("feature maps {:?} vs {:?}", g.shape(a), g.shape(b))));
            }
            let d = g.sub(a, b)?;
            let d = g.abs(d);
            terms.push(g.mean(d));
        }
    }
    mean_of(g, &terms)
}

/// `L_stft + tau·(L_adv + lambda·L_fm)`.
pub fn generator_loss<T: Real>(g: &mut Graph<T>, l_stft: Var, l_adv: Var, l_fm: Var, w: &LossWeights) -> Result<Var> {
    let fm = g.scale(l_fm, w.lambda);
    let gan = g.add(l_adv, fm)?;
    let gan = g.scale(gan, w.tau);
    g.add(l_stft, gan)
}

/// Scalar form of [`generator_loss`].
pub fn generator_loss_value(l_stft: f64, l_adv: f64, l_fm: f64, w: &LossWeights) -> f64 {
    l_stft + w.tau * (l_adv + w.lambda * l_fm)
}

/// Scale-averaged `mean((1 − D(y))²) + mean(D(ŷ)²)`.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real: &[ScaleOutput], fake: &[ScaleOutput]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::shape(format!("{} real scales vs {} fake", real.len(), fake.len())));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (r, f) in real.iter().zip(fake) {
        let a = mse_to(g, r.output, 1.0);
        let b = mse_to(g, f.output, 0.0);
        terms.push(g.add(a, b)?);
    }
    mean_of(g, &terms)
}

#[cfg(test)]
mod tests;
