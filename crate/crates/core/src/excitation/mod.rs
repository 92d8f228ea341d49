//! Encoder, additive harmonic oscillator and shaped-noise source.
//!
//! Frame-rate quantities are `[T̂×C]`, sample-rate quantities `[T×C]`, both
//! row-major with time along rows. The oscillator carrier (mask, phase and
//! voicing gate) depends only on F0 and voicing, so it is computed in `f64`
//! outside the gradient path; gradients reach the encoder through the
//! harmonic distribution `A`, the envelope `alpha` and the noise branch.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::features::{interpolate_unvoiced, AcousticFeatures};
use crate::numcore::kernels;
use crate::numcore::{Activation, ConvSpec, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

/// Harmonics above this frequency are masked out.
pub const MASK_CUTOFF_HZ: f64 = 3300.0;
pub const NOISE_FIR_LEN: usize = 257;
pub const ENCODER_KERNEL: usize = 5;
/// Initial noise gain `a`.
pub const NOISE_GAIN_INIT: f32 = 1.0 / (2.0 * std::f32::consts::PI);
/// Spread of the non-leading taps of a freshly initialised FIR.
pub const FIR_INIT_STD: f32 = 1e-4;

/// `[T̂ × (n_mels + 2)]`: mel bins, then F0 in cycles/sample, then voicing.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningFrames {
    pub data: Vec<f32>,
    pub frames: usize,
    pub channels: usize,
}

impl ConditioningFrames {
    pub fn to_var<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.constant_vec(
            vec![self.frames, self.channels],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }
}

pub fn build_conditioning(f: &AcousticFeatures) -> Result<ConditioningFrames> {
    f.validate()?;
    let f0 = interpolate_unvoiced(&f.f0_hz);
    let sr = f.sample_rate as f32;
    let channels = f.n_mels + 2;
    let mut data = Vec::with_capacity(f.frames() * channels);
    for t in 0..f.frames() {
        data.extend_from_slice(f.mel_row(t));
        data.push(f0[t] / sr);
        data.push(f.uv[t] as f32);
    }
    Ok(ConditioningFrames {
        data,
        frames: f.frames(),
        channels,
    })
}

pub struct EncoderOutput {
    pub h_osc: Var,
    pub h_noise: Var,
}

/// Two same-padded K=5 convolutions with leaky ReLU, a dense layer, then a
/// channel split into oscillator and noise halves.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub in_channels: usize,
    pub channels: usize,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    dense: (ParamId, ParamId),
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_channels: usize, channels: usize, rng: &mut R) -> Result<Self> {
        if in_channels == 0 || channels == 0 || !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder needs positive inputs and an even width, got {in_channels} → {channels}"
            )));
        }
        let k = ENCODER_KERNEL;
        let i1 = Init::fan_in(in_channels * k);
        let i2 = Init::fan_in(channels * k);
        let i3 = Init::fan_in(channels);
        Ok(Self {
            in_channels,
            channels,
            conv1: (
                store.add("encoder.conv1.weight", vec![channels, in_channels, k], i1, rng)?,
                store.add("encoder.conv1.bias", vec![channels], i1, rng)?,
            ),
            conv2: (
                store.add("encoder.conv2.weight", vec![channels, channels, k], i2, rng)?,
                store.add("encoder.conv2.bias", vec![channels], i2, rng)?,
            ),
            dense: (
                store.add("encoder.dense.weight", vec![channels, channels], i3, rng)?,
                store.add("encoder.dense.bias", vec![channels], i3, rng)?,
            ),
        })
    }

    /// Rebinds to parameters already present in `store`.
    pub fn attach(store: &ParamStore) -> Result<Self> {
        let w1 = find(store, "encoder.conv1.weight")?;
        let s = &store.get(w1).shape;
        let (channels, in_channels) = (s[0], s[1]);
        Ok(Self {
            in_channels,
            channels,
            conv1: (w1, find(store, "encoder.conv1.bias")?),
            conv2: (find(store, "encoder.conv2.weight")?, find(store, "encoder.conv2.bias")?),
            dense: (find(store, "encoder.dense.weight")?, find(store, "encoder.dense.bias")?),
        })
    }

    pub fn half(&self) -> usize {
        self.channels / 2
    }

    /// `cond` is `[T̂ × in_channels]`; outputs are `[T̂ × channels/2]` each.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, cond: Var, train: bool) -> Result<EncoderOutput> {
        let (_, c) = g.dims2(cond);
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "encoder expects {} conditioning channels, got {c}",
                self.in_channels
            )));
        }
        let x = g.transpose(cond);
        let (w, b) = (g.bind(store, self.conv1.0, train), g.bind(store, self.conv1.1, train));
        let x = g.conv1d(x, w, Some(b), ConvSpec::same())?;
        let x = g.activation(x, Activation::LeakyRelu);
        let (w, b) = (g.bind(store, self.conv2.0, train), g.bind(store, self.conv2.1, train));
        let x = g.conv1d(x, w, Some(b), ConvSpec::same())?;
        let x = g.activation(x, Activation::LeakyRelu);
        let x = g.transpose(x);
        let (w, b) = (g.bind(store, self.dense.0, train), g.bind(store, self.dense.1, train));
        let h = g.linear(x, w, Some(b))?;
        let half = self.half();
        Ok(EncoderOutput {
            h_osc: g.slice_cols(h, 0, half)?,
            h_noise: g.slice_cols(h, half, self.channels)?,
        })
    }
}

pub(crate) fn find(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Config(format!("parameter {name} missing")))
}

pub(crate) fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("at least one harmonic is required".into()));
    }
    Ok(())
}

/// Sample-rate oscillator controls.
pub struct OscillatorControls {
    /// `[T×k]`, rows sum to one.
    pub a: Var,
    /// `[T×1]`.
    pub alpha: Var,
}

/// Dense `H_osc → k+1`, modified sigmoid, split into `A` and `alpha`.
#[derive(Clone, Debug)]
pub struct OscillatorHead {
    pub k: usize,
    w: ParamId,
    b: ParamId,
}

impl OscillatorHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, input: usize, k: usize, rng: &mut R) -> Result<Self> {
        check_k(k)?;
        let init = Init::fan_in(input);
        Ok(Self {
            k,
            w: store.add("oscillator.weight", vec![k + 1, input], init, rng)?,
            b: store.add("oscillator.bias", vec![k + 1], init, rng)?,
        })
    }

    pub fn attach(store: &ParamStore) -> Result<Self> {
        let w = find(store, "oscillator.weight")?;
        Ok(Self {
            k: store.get(w).shape[0] - 1,
            w,
            b: find(store, "oscillator.bias")?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        h_osc: Var,
        hop: usize,
        train: bool,
    ) -> Result<OscillatorControls> {
        let (w, b) = (g.bind(store, self.w, train), g.bind(store, self.b, train));
        let x = g.linear(h_osc, w, Some(b))?;
        let x = g.activation(x, Activation::ModifiedSigmoid);
        let a = g.slice_cols(x, 0, self.k)?;
        let a = g.normalize_rows(a);
        let alpha = g.slice_cols(x, self.k, self.k + 1)?;
        Ok(OscillatorControls {
            a: g.upsample_linear(a, hop)?,
            alpha: g.upsample_linear(alpha, hop)?,
        })
    }
}

/// Learned envelope `beta`, gain `a` and a causal 257-tap FIR.
#[derive(Clone, Debug)]
pub struct NoiseShaper {
    w: ParamId,
    b: ParamId,
    pub gain: ParamId,
    pub fir: ParamId,
}

impl NoiseShaper {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, input: usize, rng: &mut R) -> Result<Self> {
        let init = Init::fan_in(input);
        Ok(Self {
            w: store.add("noise.weight", vec![1, input], init, rng)?,
            b: store.add("noise.bias", vec![1], init, rng)?,
            gain: store.add("noise.gain", vec![1], Init::Constant(NOISE_GAIN_INIT), rng)?,
            fir: store.add("noise.fir", vec![NOISE_FIR_LEN], Init::Impulse(FIR_INIT_STD), rng)?,
        })
    }

    pub fn attach(store: &ParamStore) -> Result<Self> {
        let fir = find(store, "noise.fir")?;
        if store.get(fir).numel() != NOISE_FIR_LEN {
            return Err(Error::Config(format!(
                "noise FIR must have {NOISE_FIR_LEN} taps, found {}",
                store.get(fir).numel()
            )));
        }
        Ok(Self {
            w: find(store, "noise.weight")?,
            b: find(store, "noise.bias")?,
            gain: find(store, "noise.gain")?,
            fir,
        })
    }

    /// `[T×1]` sample-rate envelope in `(1e-7, 2+1e-7)`.
    pub fn envelope<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, h_noise: Var, hop: usize, train: bool) -> Result<Var> {
        let (w, b) = (g.bind(store, self.w, train), g.bind(store, self.b, train));
        let x = g.linear(h_noise, w, Some(b))?;
        let beta = g.activation(x, Activation::ModifiedSigmoid);
        g.upsample_linear(beta, hop)
    }

    /// `fir(a·beta·n)` for a given envelope and unit-variance noise.
    pub fn shape<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, beta: Var, noise: &[f64], train: bool) -> Result<Var> {
        let (rows, _) = g.dims2(beta);
        if noise.len() != rows {
            return Err(Error::shape(format!("{} noise samples for {rows} envelope samples", noise.len())));
        }
        let n = g.constant_vec(vec![rows, 1], noise.iter().map(|&v| T::lit(v)).collect())?;
        let gain = g.bind(store, self.gain, train);
        let z = g.mul(beta, n)?;
        let z = g.mul(z, gain)?;
        let h = g.bind(store, self.fir, train);
        Ok(g.fir(z, h))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        h_noise: Var,
        hop: usize,
        noise: &[f64],
        train: bool,
    ) -> Result<Var> {
        let beta = self.envelope(g, store, h_noise, hop, train)?;
        self.shape(g, store, beta, noise, train)
    }
}

/// `F[i][j] = (j+1)·f0[i]`, `[T×k]`.
pub fn harmonic_frequencies(f0_norm: &[f64], k: usize) -> Result<Vec<f64>> {
    check_k(k)?;
    Ok(f0_norm
        .iter()
        .flat_map(|&f| (1..=k).map(move |j| j as f64 * f))
        .collect())
}

/// 0 where the harmonic lies strictly above 3.3 kHz, else 1. A relative
/// guard of 1e-12 keeps products like 22·(150/22050) on the boundary.
pub fn harmonic_mask(f: &[f64], sample_rate: f64) -> Vec<f64> {
    let limit = MASK_CUTOFF_HZ * (1.0 + 1e-12);
    f.iter()
        .map(|&v| if v * sample_rate > limit { 0.0 } else { 1.0 })
        .collect()
}

/// `theta = 2π·cumsum_time(F)` over `[T×k]`.
pub fn harmonic_phase(f: &[f64], k: usize) -> Vec<f64> {
    let rows = f.len() / k;
    kernels::cumsum_rows(f, rows, k)
        .into_iter()
        .map(|c| 2.0 * PI * c)
        .collect()
}

pub fn draw_phases<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-PI, PI).expect("finite range");
    (0..k).map(|_| dist.sample(rng)).collect()
}

pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `P = alpha·M·A·sin(theta + phi)`; `alpha` is `[T]`, the rest `[T×k]`.
pub fn render_harmonics(f: &[f64], m: &[f64], a: &[f64], alpha: &[f64], phi: &[f64]) -> Result<Vec<f64>> {
    let k = phi.len();
    check_k(k)?;
    let t = alpha.len();
    if f.len() != t * k || m.len() != t * k || a.len() != t * k {
        return Err(Error::shape(format!(
            "render_harmonics: F {}, M {}, A {} for T={t}, k={k}",
            f.len(),
            m.len(),
            a.len()
        )));
    }
    let theta = harmonic_phase(f, k);
    Ok((0..t * k)
        .map(|i| alpha[i / k] * m[i] * a[i] * (theta[i] + phi[i % k]).sin())
        .collect())
}

/// Zeroes harmonics in samples whose frame (`i / hop`) is unvoiced.
pub fn gate_unvoiced(p: &[f64], uv: &[u8], hop: usize, k: usize) -> Result<Vec<f64>> {
    if hop == 0 || k == 0 || !p.len().is_multiple_of(k) || p.len() / k > uv.len() * hop {
        return Err(Error::shape(format!(
            "gate_unvoiced: {} values, k={k}, {} frames × hop {hop}",
            p.len(),
            uv.len()
        )));
    }
    Ok(p.iter()
        .enumerate()
        .map(|(i, &v)| if uv[i / k / hop] == 1 { v } else { 0.0 })
        .collect())
}

/// `gate·M·sin(theta + phi)` at sample rate, `[T×k]` with `T = frames·hop`.
/// The per-sample phase is kept wrapped to one cycle.
pub fn harmonic_carrier(f: &AcousticFeatures, k: usize, phi: &[f64]) -> Result<Vec<f64>> {
    check_k(k)?;
    if phi.len() != k {
        return Err(Error::shape(format!("{} phases for {k} harmonics", phi.len())));
    }
    let sr = f.sample_rate as f64;
    let f0: Vec<f64> = interpolate_unvoiced(&f.f0_hz)
        .into_iter()
        .map(|v| v as f64 / sr)
        .collect();
    let f0 = kernels::upsample_linear(&f0, f0.len(), 1, f.hop_samples);
    let mut out = Vec::with_capacity(f0.len() * k);
    let mut cycles = 0.0f64;
    for (i, &fi) in f0.iter().enumerate() {
        cycles = (cycles + fi).fract();
        let voiced = f.uv[i / f.hop_samples] == 1;
        for (j, &ph) in phi.iter().enumerate() {
            let h = (j + 1) as f64;
            let on = voiced && h * fi * sr <= MASK_CUTOFF_HZ * (1.0 + 1e-12);
            out.push(if on { ((h * cycles).fract() * 2.0 * PI + ph).sin() } else { 0.0 });
        }
    }
    Ok(out)
}

/// Gated harmonics `O = alpha·A·carrier`, `[T×k]`.
pub fn gated_harmonics<T: Real>(g: &mut Graph<T>, ctl: &OscillatorControls, carrier: &[f64]) -> Result<Var> {
    let (rows, k) = g.dims2(ctl.a);
    if carrier.len() != rows * k {
        return Err(Error::shape(format!("carrier has {} values, expected {rows}×{k}", carrier.len())));
    }
    let c = g.constant(Tensor::matrix(rows, k, carrier.iter().map(|&v| T::lit(v)).collect())?);
    let amp = g.mul(ctl.a, ctl.alpha)?;
    g.mul(amp, c)
}

/// `[T×(k+1)]`: harmonics first, noise last.
pub fn assemble_excitation<T: Real>(g: &mut Graph<T>, o: Var, z: Var) -> Result<Var> {
    let (to, _) = g.dims2(o);
    let zn: usize = g.shape(z).iter().product();
    if zn != to {
        return Err(Error::shape(format!("{to} harmonic samples but {zn} noise samples")));
    }
    let z = g.reshape(z, vec![to, 1])?;
    g.concat_cols(&[o, z])
}

#[cfg(test)]
mod tests;
