//! Simplified WaveNet filter, output FIR and the assembled generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::excitation::{
    assemble_excitation, build_conditioning, draw_phases, find, gated_harmonics, gaussian_noise, harmonic_carrier,
    Encoder, NoiseShaper, OscillatorHead, FIR_INIT_STD, NOISE_FIR_LEN,
};
use crate::features::{AcousticFeatures, DEFAULT_HOP, DEFAULT_N_MELS, DEFAULT_SAMPLE_RATE};
use crate::numcore::{Activation, ConvSpec, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

pub const OUTPUT_FIR_LEN: usize = 257;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveNetConfig {
    pub stacks: usize,
    pub layers_per_stack: usize,
    pub channels: usize,
    pub kernel: usize,
    pub dilation_base: usize,
    /// Layer nonlinearity; `Identity` exists for linearity probes.
    pub activation: Activation,
}

impl Default for WaveNetConfig {
    fn default() -> Self {
        Self {
            stacks: 3,
            layers_per_stack: 10,
            channels: 64,
            kernel: 5,
            dilation_base: 2,
            activation: Activation::Tanh,
        }
    }
}

impl WaveNetConfig {
    pub fn toy() -> Self {
        Self {
            stacks: 1,
            layers_per_stack: 6,
            channels: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stacks == 0 || self.layers_per_stack == 0 || self.channels == 0 || self.dilation_base == 0 {
            return Err(Error::Config(format!(
                "WaveNet needs at least one stack, layer, channel and a positive dilation base: {self:?}"
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("WaveNet kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_base.pow(layer as u32)
    }

    /// `1 + stacks·(K−1)·Σ_l base^l`.
    pub fn receptive_field(&self) -> usize {
        let per_stack: usize = (0..self.layers_per_stack).map(|l| self.dilation(l)).sum();
        1 + self.stacks * (self.kernel - 1) * per_stack
    }

    pub fn num_layers(&self) -> usize {
        self.stacks * self.layers_per_stack
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub n_mels: usize,
    pub k_harmonics: usize,
    pub encoder_channels: usize,
    pub wavenet: WaveNetConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            hop: DEFAULT_HOP,
            n_mels: DEFAULT_N_MELS,
            k_harmonics: 64,
            encoder_channels: 256,
            wavenet: WaveNetConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn toy() -> Self {
        Self {
            k_harmonics: 16,
            encoder_channels: 32,
            wavenet: WaveNetConfig::toy(),
            ..Self::default()
        }
    }

    pub fn cond_channels(&self) -> usize {
        self.n_mels + 2
    }

    pub fn validate(&self) -> Result<()> {
        self.wavenet.validate()?;
        if self.k_harmonics == 0 || self.n_mels == 0 || self.hop == 0 || self.sample_rate == 0 {
            return Err(Error::Config(format!("degenerate generator config: {self:?}")));
        }
        if self.encoder_channels == 0 || !self.encoder_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder width must be even and positive, got {}",
                self.encoder_channels
            )));
        }
        Ok(())
    }

    /// Checks that features were produced with this generator's framing.
    pub fn check_features(&self, f: &AcousticFeatures) -> Result<()> {
        let pairs = [
            ("hop", self.hop, f.hop_samples),
            ("n_mels", self.n_mels, f.n_mels),
            ("sample_rate", self.sample_rate as usize, f.sample_rate as usize),
        ];
        for (name, model, feats) in pairs {
            if model != feats {
                return Err(Error::Config(format!(
                    "{name} mismatch: model uses {model}, features have {feats}"
                )));
            }
        }
        Ok(())
    }
}

/// Trainable element count implied by `cfg`.
pub fn count_parameters(cfg: &GeneratorConfig) -> Result<usize> {
    cfg.validate()?;
    let (c, e, k, ch, kk) = (
        cfg.cond_channels(),
        cfg.encoder_channels,
        cfg.k_harmonics,
        cfg.wavenet.channels,
        cfg.wavenet.kernel,
    );
    let h = e / 2;
    let encoder = (c * e * 5 + e) + (e * e * 5 + e) + (e * e + e);
    let oscillator = h * (k + 1) + (k + 1);
    let noise = h + 1 + 1 + NOISE_FIR_LEN;
    let layer = (ch * ch * kk + ch) + (c * ch + ch) + (ch * ch + ch);
    let wavenet = ((k + 1) * ch + ch) + cfg.wavenet.num_layers() * layer + (ch + 1);
    Ok(encoder + oscillator + noise + wavenet + OUTPUT_FIR_LEN)
}

#[derive(Clone, Debug)]
struct Layer {
    dilation: usize,
    conv: (ParamId, ParamId),
    cond: (ParamId, ParamId),
    residual: (ParamId, ParamId),
}

/// Side conditioning for the WaveNet, at frame or sample rate (`[rows × C]`).
#[derive(Clone, Copy, Debug)]
pub enum Conditioning {
    Frames { var: Var, hop: usize },
    Samples(Var),
}

#[derive(Clone, Debug)]
pub struct WaveNet {
    pub cfg: WaveNetConfig,
    pub in_channels: usize,
    pub cond_channels: usize,
    input: (ParamId, ParamId),
    layers: Vec<Layer>,
    output: (ParamId, ParamId),
}

fn layer_name(stack: usize, layer: usize, part: &str) -> String {
    format!("wavenet.s{stack}.l{layer}.{part}")
}

impl WaveNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &WaveNetConfig,
        in_channels: usize,
        cond_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels;
        let mut add = |name: String, shape: Vec<usize>, init: Init| store.add(name, shape, init, rng);
        let i_in = Init::fan_in(in_channels);
        let input = (
            add("wavenet.input.weight".into(), vec![ch, in_channels, 1], i_in)?,
            add("wavenet.input.bias".into(), vec![ch], i_in)?,
        );
        let mut layers = Vec::with_capacity(cfg.num_layers());
        for s in 0..cfg.stacks {
            for l in 0..cfg.layers_per_stack {
                let i_conv = Init::fan_in(ch * cfg.kernel);
                let i_cond = Init::fan_in(cond_channels);
                let i_res = Init::fan_in(ch);
                layers.push(Layer {
                    dilation: cfg.dilation(l),
                    conv: (
                        add(layer_name(s, l, "dilated.weight"), vec![ch, ch, cfg.kernel], i_conv)?,
                        add(layer_name(s, l, "dilated.bias"), vec![ch], i_conv)?,
                    ),
                    cond: (
                        add(layer_name(s, l, "cond.weight"), vec![ch, cond_channels], i_cond)?,
                        add(layer_name(s, l, "cond.bias"), vec![ch], i_cond)?,
                    ),
                    residual: (
                        add(layer_name(s, l, "residual.weight"), vec![ch, ch, 1], i_res)?,
                        add(layer_name(s, l, "residual.bias"), vec![ch], i_res)?,
                    ),
                });
            }
        }
        let i_out = Init::fan_in(ch);
        let output = (
            add("wavenet.output.weight".into(), vec![1, ch, 1], i_out)?,
            add("wavenet.output.bias".into(), vec![1], i_out)?,
        );
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            cond_channels,
            input,
            layers,
            output,
        })
    }

    pub fn attach(store: &ParamStore, cfg: &WaveNetConfig) -> Result<Self> {
        cfg.validate()?;
        let pair = |name: &str| -> Result<(ParamId, ParamId)> {
            Ok((find(store, &format!("{name}.weight"))?, find(store, &format!("{name}.bias"))?))
        };
        let input = pair("wavenet.input")?;
        let output = pair("wavenet.output")?;
        let mut layers = Vec::new();
        for s in 0..cfg.stacks {
            for l in 0..cfg.layers_per_stack {
                layers.push(Layer {
                    dilation: cfg.dilation(l),
                    conv: pair(&layer_name(s, l, "dilated"))?,
                    cond: pair(&layer_name(s, l, "cond"))?,
                    residual: pair(&layer_name(s, l, "residual"))?,
                });
            }
        }
        let in_channels = store.get(input.0).shape[1];
        let cond_channels = store.get(layers[0].cond.0).shape[1];
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            cond_channels,
            input,
            layers,
            output,
        })
    }

    /// Parameters of every layer, in creation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.input.0, self.input.1];
        for l in &self.layers {
            ids.extend([l.conv.0, l.conv.1, l.cond.0, l.cond.1, l.residual.0, l.residual.1]);
        }
        ids.extend([self.output.0, self.output.1]);
        ids
    }

    /// `excitation` is `[T × in_channels]`; returns `w` as `[1×T]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        excitation: Var,
        cond: Conditioning,
        train: bool,
    ) -> Result<Var> {
        let (t, c_in) = g.dims2(excitation);
        if c_in != self.in_channels {
            return Err(Error::shape(format!(
                "WaveNet expects {} excitation channels, got {c_in}",
                self.in_channels
            )));
        }
        let (cond_var, rows, up) = match cond {
            Conditioning::Frames { var, hop } => (var, g.dims2(var).0, hop),
            Conditioning::Samples(var) => (var, g.dims2(var).0, 1),
        };
        let (_, cc) = g.dims2(cond_var);
        if cc != self.cond_channels || rows * up != t {
            return Err(Error::shape(format!(
                "conditioning [{rows}×{cc}] at ×{up} does not cover {t} samples of {} channels",
                self.cond_channels
            )));
        }
        let xin = g.transpose(excitation);
        let (w, b) = (g.bind(store, self.input.0, train), g.bind(store, self.input.1, train));
        let mut x = g.conv1d(xin, w, Some(b), ConvSpec::same())?;
        g.release(xin);
        for layer in &self.layers {
            let (w, b) = (g.bind(store, layer.cond.0, train), g.bind(store, layer.cond.1, train));
            let c = g.linear(cond_var, w, Some(b))?;
            let c = if up > 1 {
                let u = g.upsample_linear(c, up)?;
                g.release(c);
                u
            } else {
                c
            };
            let ct = g.transpose(c);
            g.release(c);
            let (w, b) = (g.bind(store, layer.conv.0, train), g.bind(store, layer.conv.1, train));
            let d = g.conv1d(x, w, Some(b), ConvSpec::dilated(layer.dilation))?;
            let pre = g.add(d, ct)?;
            g.release(d);
            g.release(ct);
            let h = g.activation(pre, self.cfg.activation);
            g.release(pre);
            let (w, b) = (g.bind(store, layer.residual.0, train), g.bind(store, layer.residual.1, train));
            let r = g.conv1d(h, w, Some(b), ConvSpec::same())?;
            g.release(h);
            let next = g.add(x, r)?;
            g.release(x);
            g.release(r);
            x = next;
        }
        let (w, b) = (g.bind(store, self.output.0, train), g.bind(store, self.output.1, train));
        let out = g.conv1d(x, w, Some(b), ConvSpec::same())?;
        g.release(x);
        Ok(out)
    }
}

/// Causal filtering of `w` by a 257-tap response, truncated to `len(w)`.
pub fn output_fir<T: Real>(g: &mut Graph<T>, w: Var, h: Var) -> Result<Var> {
    let n: usize = g.shape(h).iter().product();
    if n != OUTPUT_FIR_LEN {
        return Err(Error::shape(format!("output FIR must have {OUTPUT_FIR_LEN} taps, got {n}")));
    }
    Ok(g.fir(w, h))
}

pub struct GeneratorOutput {
    /// `[T]`
    pub y_hat: Var,
    /// `[T]`, the channel sum of the excitation.
    pub o: Var,
    /// `[T×(k+1)]`
    pub excitation: Var,
}

/// Random inputs for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDraw {
    pub phi: Vec<f64>,
    pub noise: Vec<f64>,
}

impl SourceDraw {
    /// Phases first, then one Gaussian per output sample.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, k: usize, samples: usize) -> Self {
        let phi = draw_phases(rng, k);
        let noise = gaussian_noise(rng, samples);
        Self { phi, noise }
    }
}

pub struct Synthesis {
    pub y_hat: Vec<f32>,
    pub o: Vec<f32>,
    pub excitation: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub cfg: GeneratorConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub oscillator: OscillatorHead,
    pub noise: NoiseShaper,
    pub wavenet: WaveNet,
    pub output_fir: ParamId,
}

impl GeneratorModel {
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg.cond_channels(), cfg.encoder_channels, &mut rng)?;
        let half = encoder.half();
        let oscillator = OscillatorHead::new(&mut store, half, cfg.k_harmonics, &mut rng)?;
        let noise = NoiseShaper::new(&mut store, half, &mut rng)?;
        let wavenet = WaveNet::new(&mut store, &cfg.wavenet, cfg.k_harmonics + 1, cfg.cond_channels(), &mut rng)?;
        let output_fir = store.add("output.fir", vec![OUTPUT_FIR_LEN], Init::Impulse(FIR_INIT_STD), &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            oscillator,
            noise,
            wavenet,
            output_fir,
        })
    }

    /// Adopts externally loaded parameters after checking names and shapes
    /// against `cfg`.
    pub fn from_store(cfg: &GeneratorConfig, loaded: ParamStore) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Config(format!(
                "expected {} generator tensors, found {}",
                model.store.len(),
                loaded.len()
            )));
        }
        for p in model.store.iter_mut() {
            let src = loaded
                .by_name(&p.name)
                .ok_or_else(|| Error::Config(format!("generator tensor {} missing", p.name)))?;
            if src.shape != p.shape {
                return Err(Error::Config(format!(
                    "generator tensor {} has shape {:?}, config implies {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            p.data.copy_from_slice(&src.data);
        }
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Parameters of the encoder, oscillator and noise source.
    pub fn excitation_param_ids(&self) -> Vec<ParamId> {
        let wn: std::collections::HashSet<ParamId> = self.filter_param_ids().into_iter().collect();
        self.store.iter().map(|(id, _)| id).filter(|id| !wn.contains(id)).collect()
    }

    /// WaveNet parameters plus the output FIR.
    pub fn filter_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.wavenet.param_ids();
        ids.push(self.output_fir);
        ids
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        feats: &AcousticFeatures,
        draw: &SourceDraw,
        train: bool,
    ) -> Result<GeneratorOutput> {
        self.cfg.check_features(feats)?;
        let hop = self.cfg.hop;
        let samples = feats.num_samples();
        let store = &self.store;
        let cond = build_conditioning(feats)?.to_var(g)?;
        let enc = self.encoder.forward(g, store, cond, train)?;
        let ctl = self.oscillator.forward(g, store, enc.h_osc, hop, train)?;
        let carrier = harmonic_carrier(feats, self.cfg.k_harmonics, &draw.phi)?;
        let o_h = gated_harmonics(g, &ctl, &carrier)?;
        drop(carrier);
        if draw.noise.len() != samples {
            return Err(Error::shape(format!("{} noise samples for {samples} outputs", draw.noise.len())));
        }
        let z = self.noise.forward(g, store, enc.h_noise, hop, &draw.noise, train)?;
        let excitation = assemble_excitation(g, o_h, z)?;
        let o = g.sum_cols(excitation);
        let o = g.reshape(o, vec![samples])?;
        let w = self.wavenet.forward(g, store, excitation, Conditioning::Frames { var: cond, hop }, train)?;
        let h = g.bind(store, self.output_fir, train);
        let y = output_fir(g, w, h)?;
        let y_hat = g.reshape(y, vec![samples])?;
        Ok(GeneratorOutput { y_hat, o, excitation })
    }

    /// Inference pass: draws phases and noise from `rng`, returns plain buffers.
    pub fn synthesize<R: Rng + ?Sized>(&self, feats: &AcousticFeatures, rng: &mut R) -> Result<Synthesis> {
        let draw = SourceDraw::sample(rng, self.cfg.k_harmonics, feats.num_samples());
        let mut g = Graph::<f32>::inference();
        let out = self.forward(&mut g, feats, &draw, false)?;
        Ok(Synthesis {
            y_hat: g.data(out.y_hat).to_vec(),
            o: g.data(out.o).to_vec(),
            excitation: g.data(out.excitation).to_vec(),
        })
    }
}

/// Impulse-sensitivity measurement of the WaveNet's receptive field: a single
/// nonzero excitation sample, zero conditioning and biases, random weights;
/// returns the span of nonzero outputs.
pub fn measure_receptive_field(cfg: &WaveNetConfig, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (c_in, c_cond) = (2, 3);
    let wn = WaveNet::new(&mut store, cfg, c_in, c_cond, &mut rng)?;
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") {
            p.data.fill(0.0);
        }
    }
    let rf = cfg.receptive_field();
    let t = rf + 64;
    let centre = t / 2;
    let mut exc = vec![0.0f64; t * c_in];
    exc[centre * c_in] = 1.0;
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::matrix(t, c_in, exc)?);
    let c = g.constant(Tensor::zeros(vec![t, c_cond]));
    let w = wn.forward(&mut g, &store, x, Conditioning::Samples(c), false)?;
    let out = g.data(w);
    let first = out.iter().position(|&v| v != 0.0);
    let last = out.iter().rposition(|&v| v != 0.0);
    match (first, last) {
        (Some(a), Some(b)) => Ok(b - a + 1),
        _ => Ok(0),
    }
}
