//! Numeric kernels and a small define-by-run reverse-mode tape.
//!
//! Everything the vocoder needs to train is expressed through [`Graph`]: a
//! fixed set of ops (convolutions, activations, upsampling, cumulative sums,
//! STFT magnitudes, elementwise arithmetic and reductions), each with a
//! hand-written vector-Jacobian product. The graph is generic over [`Real`]
//! so the same model code runs in `f32` for training and in `f64` for
//! finite-difference verification.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod stft;

use std::collections::HashMap;
use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub use graph::{Activation, ConvSpec, Graph, Padding, ParamGrads, Var};

/// Scalar type accepted by the tape and kernels.
pub trait Real:
    Float + rustfft::FftNum + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as a matrix; 1-D tensors are a single column.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            s => (s[0], s[1..].iter().product()),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable array with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "parameter {name}: shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            grad: vec![0.0; n],
            data,
            trainable: true,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_tensor(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

/// Ordered collection of parameters addressed by [`ParamId`] or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: ParamTensor) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::invalid(format!("duplicate parameter {}", param.name)));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    /// Adds a parameter with values drawn from `init`.
    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = init.sample(n, rng);
        self.insert(ParamTensor::new(name, shape, data)?)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` (from any precision) into the gradient buffers.
    pub fn accumulate<T: Real>(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = self
                .params
                .get_mut(id.0)
                .ok_or_else(|| Error::invalid(format!("unknown parameter id {}", id.0)))?;
            if p.grad.len() != g.len() {
                return Err(Error::shape(format!(
                    "gradient for {} has {} elements, expected {}",
                    p.name,
                    g.len(),
                    p.grad.len()
                )));
            }
            for (dst, src) in p.grad.iter_mut().zip(g) {
                *dst += src.as_f64() as f32;
            }
        }
        Ok(())
    }
}

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f32),
    /// Uniform in `[-bound, bound]`.
    Uniform(f32),
    Normal(f32),
    /// Unit impulse at tap 0, remaining taps drawn from N(0, std²).
    Impulse(f32),
}

impl Init {
    /// Uniform fan-in init (`1/sqrt(fan_in)` bound), as used for conv and dense layers.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f32).sqrt())
    }

    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f32> {
        match self {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Uniform(b) => {
                if b == 0.0 {
                    return vec![0.0; n];
                }
                let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0f32, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Impulse(std) => {
                let dist = Normal::new(0.0f32, std).expect("finite std");
                (0..n)
                    .map(|i| if i == 0 { 1.0 } else { dist.sample(rng) })
                    .collect()
            }
        }
    }
}
