use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::kernels::{self, ConvGeom};
use super::stft::{self, StftGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU used throughout the model.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Additive floor of the modified sigmoid.
pub const MOD_SIGMOID_FLOOR: f64 = 1e-7;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Leaky ReLU with slope 0.2 for negative inputs.
    LeakyRelu,
    Sigmoid,
    /// `2·σ(x)^ln(10) + 1e-7`.
    ModifiedSigmoid,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Tanh,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::ModifiedSigmoid,
        Activation::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Sigmoid => "sigmoid",
            Activation::ModifiedSigmoid => "modified_sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::ModifiedSigmoid => modified_sigmoid(x),
            Activation::Identity => x,
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn modified_sigmoid<T: Real>(x: T) -> T {
    // log σ(x) = -softplus(-x), evaluated without overflow
    let neg = -x;
    let softplus = neg.max(T::zero()) + (-(neg.abs())).exp().ln_1p();
    let ln10 = T::lit(std::f64::consts::LN_10);
    T::lit(2.0) * (-ln10 * softplus).exp() + T::lit(MOD_SIGMOID_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(K-1)·dilation/2` zeros on each side; `K` must be odd.
    SameZero,
    /// All `(K-1)·dilation` zeros on the left.
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::SameZero,
        }
    }

    pub fn dilated(dilation: usize) -> Self {
        Self {
            dilation,
            ..Self::same()
        }
    }

    pub fn causal(dilation: usize) -> Self {
        Self {
            dilation,
            padding: Padding::Causal,
            ..Self::same()
        }
    }

    pub fn strided(stride: usize, groups: usize) -> Self {
        Self {
            stride,
            groups,
            ..Self::same()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        c_in: usize,
        c_out: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    UpLinear {
        x: Var,
        rows: usize,
        cols: usize,
        factor: usize,
    },
    UpNearest {
        x: Var,
        rows: usize,
        cols: usize,
        factor: usize,
    },
    Cumsum {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Stft {
        x: Var,
        geom: StftGeom,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinKind,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    Sin {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    LogFloor {
        x: Var,
        floor: f64,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SumCols {
        x: Var,
        rows: usize,
        cols: usize,
    },
    NormalizeRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
        rows: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
        rows: usize,
        cols: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Fir {
        x: Var,
        h: Var,
    },
    AvgPool {
        x: Var,
        channels: usize,
        t_in: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Option<Vec<T>>,
    op: Op,
    needs_grad: bool,
    spectra: Option<Vec<Complex<T>>>,
}

/// Gradients keyed by parameter, produced by [`Graph::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads<T> {
    grads: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Define-by-run record of executed ops.
///
/// Values are kept for every node while gradients are enabled; with
/// gradients disabled, [`Graph::release`] drops intermediates that are no
/// longer needed so long signals can be synthesized in bounded memory.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    backward_done: bool,
    planner: FftPlanner<T>,
    perturb: Option<(ParamId, usize, f64)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            backward_done: false,
            planner: FftPlanner::new(),
            perturb: None,
        }
    }

    /// A graph that records no adjoint information.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all recorded ops so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0]
            .value
            .as_deref()
            .expect("graph value was released")
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.data(v).to_vec(),
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.data(v)[0]
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        Tensor::<T> {
            shape: self.shape(v).to_vec(),
            data: Vec::new(),
        }
        .dims2()
    }

    /// Drops a value that later ops no longer read. No-op while recording gradients.
    pub fn release(&mut self, v: Var) {
        if !self.grad_enabled {
            self.nodes[v.0].value = None;
            self.nodes[v.0].spectra = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            needs_grad: needs_grad && self.grad_enabled,
            spectra: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    /// Offsets one element of a parameter, in this graph's precision, whenever
    /// it is bound by [`Graph::param`] or [`Graph::frozen`]. Used for finite differences.
    pub fn set_perturbation(&mut self, id: ParamId, index: usize, delta: f64) {
        self.perturb = Some((id, index, delta));
    }

    fn param_values(&self, store: &ParamStore, id: ParamId) -> Vec<T> {
        let p = store.get(id);
        let mut data: Vec<T> = p.data.iter().map(|&v| T::lit(v as f64)).collect();
        if let Some((pid, idx, delta)) = self.perturb {
            if pid == id {
                data[idx] = data[idx] + T::lit(delta);
            }
        }
        data
    }

    /// Leaf bound to a parameter; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let data = self.param_values(store, id);
        let p = store.get(id);
        self.push(p.shape.clone(), data, Op::Param(id), p.trainable)
    }

    /// Leaf holding a parameter's current value without tracking its gradient.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let data = self.param_values(store, id);
        self.push(store.get(id).shape.clone(), data, Op::Leaf, false)
    }

    /// [`Graph::param`] when `trainable`, otherwise [`Graph::frozen`].
    pub fn bind(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if trainable {
            self.param(store, id)
        } else {
            self.frozen(store, id)
        }
    }

    /// Copies a value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.shape(v).to_vec();
        let data = self.data(v).to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (c_in, t_in) = match xs.as_slice() {
            [c, t] => (*c, *t),
            _ => return Err(Error::shape(format!("conv1d input must be [C×T], got {xs:?}"))),
        };
        let (c_out, cin_g, k) = match ws.as_slice() {
            [a, b, c] => (*a, *b, *c),
            _ => {
                return Err(Error::shape(format!(
                    "conv1d weight must be [Cout×Cin×K], got {ws:?}"
                )))
            }
        };
        if spec.dilation < 1 || spec.stride < 1 || spec.groups < 1 {
            return Err(Error::invalid("conv1d stride, dilation and groups must be ≥ 1"));
        }
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::shape(format!(
                "conv1d channels {c_in}→{c_out} not divisible by {} groups",
                spec.groups
            )));
        }
        if cin_g * spec.groups != c_in {
            return Err(Error::shape(format!(
                "conv1d weight expects {} input channels, input has {c_in}",
                cin_g * spec.groups
            )));
        }
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != c_out {
                return Err(Error::shape(format!(
                    "conv1d bias shape {:?} does not match {c_out} output channels",
                    self.shape(b)
                )));
            }
        }
        let span = (k - 1) * spec.dilation;
        let pad_left = match spec.padding {
            Padding::SameZero => {
                if k % 2 == 0 {
                    return Err(Error::invalid(format!(
                        "same padding needs an odd kernel, got {k}"
                    )));
                }
                span / 2
            }
            Padding::Causal => span,
        };
        let t_out = if t_in == 0 { 0 } else { (t_in - 1) / spec.stride + 1 };
        let geom = ConvGeom {
            c_in,
            c_out,
            kernel: k,
            t_in,
            t_out,
            stride: spec.stride,
            dilation: spec.dilation,
            groups: spec.groups,
            pad_left,
        };
        let mut out = vec![T::zero(); c_out * t_out];
        kernels::conv1d_forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(vec![c_out, t_out], out, Op::Conv { x, w, b, geom }, ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, c_in) = self.dims2(x);
        let ws = self.shape(w).to_vec();
        let (c_out, wc_in) = match ws.as_slice() {
            [o, i] => (*o, *i),
            _ => return Err(Error::shape(format!("linear weight must be 2-D, got {ws:?}"))),
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "linear weight expects {wc_in} inputs, got {c_in}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b).iter().product::<usize>() != c_out {
                return Err(Error::shape(format!(
                    "linear bias shape {:?} does not match {c_out} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![T::zero(); rows * c_out];
        kernels::linear_forward(
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            rows,
            c_in,
            c_out,
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(
            vec![rows, c_out],
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                c_in,
                c_out,
            },
            ng,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out: Vec<T> = match kind {
            Activation::Tanh => self.data(x).iter().map(|v| v.tanh()).collect(),
            Activation::LeakyRelu => {
                let s = T::lit(LEAKY_SLOPE);
                self.data(x)
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * s })
                    .collect()
            }
            Activation::Sigmoid => self.data(x).iter().map(|&v| sigmoid(v)).collect(),
            Activation::ModifiedSigmoid => {
                self.data(x).iter().map(|&v| modified_sigmoid(v)).collect()
            }
            Activation::Identity => self.data(x).to_vec(),
        };
        let ng = self.ng(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Act { x, kind }, ng)
    }

    pub fn upsample_linear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample factor must be ≥ 1"));
        }
        let (rows, cols) = self.dims2(x);
        let out = kernels::upsample_linear(self.data(x), rows, cols, factor);
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![rows * factor, cols],
            out,
            Op::UpLinear {
                x,
                rows,
                cols,
                factor,
            },
            ng,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample factor must be ≥ 1"));
        }
        let (rows, cols) = self.dims2(x);
        let out = kernels::upsample_nearest(self.data(x), rows, cols, factor);
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![rows * factor, cols],
            out,
            Op::UpNearest {
                x,
                rows,
                cols,
                factor,
            },
            ng,
        ))
    }

    /// Running sum along rows (time) of a `[T×C]` value.
    pub fn cumsum_time(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims2(x);
        let out = kernels::cumsum_rows(self.data(x), rows, cols);
        let ng = self.ng(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Cumsum { x, rows, cols }, ng)
    }

    /// `|STFT|` with a periodic Hann window, reflect center padding; `[frames × bins]`.
    pub fn stft_magnitude(&mut self, x: Var, fft_size: usize, hop: usize) -> Result<Var> {
        let len = self.shape(x).iter().product();
        let geom = StftGeom::new(len, fft_size, hop)?;
        let window = stft::hann::<T>(fft_size);
        let xv = self.nodes[x.0].value.as_deref().expect("graph value was released");
        let spec = stft::stft_complex(xv, &geom, &window, &mut self.planner);
        let mags = stft::magnitudes(&spec);
        let ng = self.ng(&[x]);
        let v = self.push(vec![geom.frames, geom.bins], mags, Op::Stft { x, geom }, ng);
        if self.nodes[v.0].needs_grad {
            self.nodes[v.0].spectra = Some(spec);
        }
        Ok(v)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (out_shape, out) = if sa == sb {
            let (da, db) = (self.data(a), self.data(b));
            let out: Vec<T> = match kind {
                BinKind::Add => da.iter().zip(db).map(|(&x, &y)| x + y).collect(),
                BinKind::Sub => da.iter().zip(db).map(|(&x, &y)| x - y).collect(),
                BinKind::Mul => da.iter().zip(db).map(|(&x, &y)| x * y).collect(),
            };
            (sa, out)
        } else {
            let (ra, ca) = self.dims2(a);
            let (rb, cb) = self.dims2(b);
            let (r, c) = broadcast_dims((ra, ca), (rb, cb)).ok_or_else(|| {
                Error::shape(format!("cannot broadcast {sa:?} with {sb:?}"))
            })?;
            let (da, db) = (self.data(a), self.data(b));
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    let x = da[bidx(i, j, ra, ca)];
                    let y = db[bidx(i, j, rb, cb)];
                    out.push(match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                    });
                }
            }
            (vec![r, c], out)
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(out_shape, out, Op::Binary { a, b, kind }, ng))
    }

    /// Elementwise sum; 2-D operands broadcast along unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cv = T::lit(c);
        self.unary(x, Op::Scale { x, c }, |v| v * cv)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cv = T::lit(c);
        self.unary(x, Op::AddScalar { x }, |v| v + cv)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin { x }, |v| v.sin())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs { x }, |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square { x }, |v| v * v)
    }

    /// `ln(max(x, floor))`; zero gradient below the floor.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let fl = T::lit(floor);
        self.unary(x, Op::LogFloor { x, floor }, |v| v.max(fl).ln())
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let n = d.len().max(1);
        let s = d.iter().fold(T::zero(), |a, &b| a + b) / T::lit(n as f64);
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean { x }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum { x }, ng)
    }

    /// Sums each row of `[T×C]` into `[T×1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims2(x);
        let d = self.data(x);
        let out = (0..rows)
            .map(|r| d[r * cols..(r + 1) * cols].iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let ng = self.ng(&[x]);
        self.push(vec![rows, 1], out, Op::SumCols { x, rows, cols }, ng)
    }

    /// Divides each row by its sum. Inputs must be strictly positive.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims2(x);
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let s = row.iter().fold(T::zero(), |a, &b| a + b);
            out.extend(row.iter().map(|&v| v / s));
        }
        let ng = self.ng(&[x]);
        self.push(vec![rows, cols], out, Op::NormalizeRows { x, rows, cols }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims2(p)).collect();
        let rows = dims.first().map(|d| d.0).unwrap_or(0);
        if dims.iter().any(|d| d.0 != rows) {
            return Err(Error::shape(format!("concat_cols row mismatch: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
                rows,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if start > end || end > cols {
            return Err(Error::shape(format!(
                "column slice {start}..{end} out of range for {cols} columns"
            )));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + end]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![rows, end - start],
            out,
            Op::SliceCols {
                x,
                start,
                end,
                rows,
                cols,
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims2(x);
        let out = kernels::transpose(self.data(x), rows, cols);
        let ng = self.ng(&[x]);
        self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.shape(x).iter().product::<usize>() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.data(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Reshape { x }, ng))
    }

    /// Causal FIR filtering of a flat signal, truncated to the input length.
    pub fn fir(&mut self, x: Var, h: Var) -> Var {
        let out = kernels::fir_causal(self.data(x), self.data(h));
        let ng = self.ng(&[x, h]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Fir { x, h }, ng)
    }

    /// Average pooling along time of `[C×T]`, padded taps excluded from the mean.
    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (channels, t_in) = self.dims2(x);
        let t_out = kernels::avg_pool_len(t_in, kernel, stride, pad);
        if t_out == 0 || stride == 0 || pad >= kernel {
            return Err(Error::invalid(format!(
                "avg_pool(kernel {kernel}, stride {stride}, pad {pad}) on length {t_in}"
            )));
        }
        let out = kernels::avg_pool_rows(self.data(x), channels, t_in, kernel, stride, pad);
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![channels, t_out],
            out,
            Op::AvgPool {
                x,
                channels,
                t_in,
                kernel,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads<T>> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; reset it first".into(),
            ));
        }
        if !self.grad_enabled {
            return Err(Error::Backward("graph was built without gradients".into()));
        }
        if self.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut out = ParamGrads::default();
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &mut self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut ParamGrads<T>,
    ) {
        let Graph { nodes, planner, .. } = self;
        let nodes: &[Node<T>] = nodes;
        macro_rules! with_slot {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body;
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.as_deref().expect("value released before backward");
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let e = out
                    .grads
                    .entry(*id)
                    .or_insert_with(|| vec![T::zero(); g.len()]);
                for (d, s) in e.iter_mut().zip(g) {
                    *d = *d + *s;
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                with_slot!(*x, |buf| kernels::conv1d_backward(
                    xv,
                    wv,
                    geom,
                    g,
                    Some(buf.as_mut_slice()),
                    None,
                    None
                ));
                with_slot!(*w, |buf| kernels::conv1d_backward(
                    xv,
                    wv,
                    geom,
                    g,
                    None,
                    Some(buf.as_mut_slice()),
                    None
                ));
                if let Some(b) = b {
                    with_slot!(*b, |buf| kernels::conv1d_backward(
                        xv,
                        wv,
                        geom,
                        g,
                        None,
                        None,
                        Some(buf.as_mut_slice())
                    ));
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                c_in,
                c_out,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (r, ci, co) = (*rows, *c_in, *c_out);
                with_slot!(*x, |buf| kernels::linear_backward(
                    xv,
                    wv,
                    r,
                    ci,
                    co,
                    g,
                    Some(buf.as_mut_slice()),
                    None,
                    None
                ));
                with_slot!(*w, |buf| kernels::linear_backward(
                    xv,
                    wv,
                    r,
                    ci,
                    co,
                    g,
                    None,
                    Some(buf.as_mut_slice()),
                    None
                ));
                if let Some(b) = b {
                    with_slot!(*b, |buf| kernels::linear_backward(
                        xv,
                        wv,
                        r,
                        ci,
                        co,
                        g,
                        None,
                        None,
                        Some(buf.as_mut_slice())
                    ));
                }
            }
            Op::Act { x, kind } => {
                let xv = val(*x);
                let yv = node.value.as_deref().expect("value released");
                with_slot!(*x, |buf| {
                    match kind {
                        Activation::Tanh => {
                            for ((d, &gi), &y) in buf.iter_mut().zip(g).zip(yv) {
                                *d = *d + gi * (T::one() - y * y);
                            }
                        }
                        Activation::LeakyRelu => {
                            let s = T::lit(LEAKY_SLOPE);
                            for ((d, &gi), &x) in buf.iter_mut().zip(g).zip(xv) {
                                *d = *d + if x > T::zero() { gi } else { gi * s };
                            }
                        }
                        Activation::Sigmoid => {
                            for ((d, &gi), &y) in buf.iter_mut().zip(g).zip(yv) {
                                *d = *d + gi * y * (T::one() - y);
                            }
                        }
                        Activation::ModifiedSigmoid => {
                            let ln10 = T::lit(std::f64::consts::LN_10);
                            let fl = T::lit(MOD_SIGMOID_FLOOR);
                            for (((d, &gi), &y), &x) in buf.iter_mut().zip(g).zip(yv).zip(xv) {
                                let s = sigmoid(x);
                                *d = *d + gi * ln10 * (y - fl) * (T::one() - s);
                            }
                        }
                        Activation::Identity => {
                            for (d, &gi) in buf.iter_mut().zip(g) {
                                *d = *d + gi;
                            }
                        }
                    }
                });
            }
            Op::UpLinear {
                x,
                rows,
                cols,
                factor,
            } => {
                with_slot!(*x, |buf| kernels::upsample_linear_backward(
                    g, *rows, *cols, *factor, buf
                ));
            }
            Op::UpNearest {
                x,
                rows,
                cols,
                factor,
            } => {
                with_slot!(*x, |buf| kernels::upsample_nearest_backward(
                    g, *rows, *cols, *factor, buf
                ));
            }
            Op::Cumsum { x, rows, cols } => {
                with_slot!(*x, |buf| kernels::cumsum_rows_backward(g, *rows, *cols, buf));
            }
            Op::Stft { x, geom } => {
                let spec = node.spectra.as_deref().expect("stft spectra not retained");
                let mags = node.value.as_deref().expect("value released");
                let window = stft::hann::<T>(geom.fft_size);
                with_slot!(*x, |buf| stft::stft_magnitude_backward(
                    spec, mags, g, geom, &window, planner, buf
                ));
            }
            Op::Binary { a, b, kind } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (av, bv) = (val(*a), val(*b));
                if sa == sb {
                    with_slot!(*a, |buf| match kind {
                        BinKind::Add | BinKind::Sub => {
                            for (d, &gi) in buf.iter_mut().zip(g) {
                                *d = *d + gi;
                            }
                        }
                        BinKind::Mul => {
                            for ((d, &gi), &y) in buf.iter_mut().zip(g).zip(bv) {
                                *d = *d + gi * y;
                            }
                        }
                    });
                    with_slot!(*b, |buf| match kind {
                        BinKind::Add => {
                            for (d, &gi) in buf.iter_mut().zip(g) {
                                *d = *d + gi;
                            }
                        }
                        BinKind::Sub => {
                            for (d, &gi) in buf.iter_mut().zip(g) {
                                *d = *d - gi;
                            }
                        }
                        BinKind::Mul => {
                            for ((d, &gi), &x) in buf.iter_mut().zip(g).zip(av) {
                                *d = *d + gi * x;
                            }
                        }
                    });
                } else {
                    let da = dims_of(sa);
                    let db = dims_of(sb);
                    let (r, c) = broadcast_dims(da, db).expect("checked in forward");
                    with_slot!(*a, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                let gi = g[i * c + j];
                                let contrib = match kind {
                                    BinKind::Add | BinKind::Sub => gi,
                                    BinKind::Mul => gi * bv[bidx(i, j, db.0, db.1)],
                                };
                                let k = bidx(i, j, da.0, da.1);
                                buf[k] = buf[k] + contrib;
                            }
                        }
                    });
                    with_slot!(*b, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                let gi = g[i * c + j];
                                let contrib = match kind {
                                    BinKind::Add => gi,
                                    BinKind::Sub => -gi,
                                    BinKind::Mul => gi * av[bidx(i, j, da.0, da.1)],
                                };
                                let k = bidx(i, j, db.0, db.1);
                                buf[k] = buf[k] + contrib;
                            }
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                let cv = T::lit(*c);
                with_slot!(*x, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi * cv;
                    }
                });
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                with_slot!(*x, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                });
            }
            Op::Sin { x } => {
                let xv = val(*x);
                with_slot!(*x, |buf| {
                    for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi * v.cos();
                    }
                });
            }
            Op::Abs { x } => {
                let xv = val(*x);
                with_slot!(*x, |buf| {
                    for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + gi;
                        } else if v < T::zero() {
                            *d = *d - gi;
                        }
                    }
                });
            }
            Op::Square { x } => {
                let xv = val(*x);
                let two = T::lit(2.0);
                with_slot!(*x, |buf| {
                    for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi * two * v;
                    }
                });
            }
            Op::LogFloor { x, floor } => {
                let xv = val(*x);
                let fl = T::lit(*floor);
                with_slot!(*x, |buf| {
                    for ((d, &gi), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > fl {
                            *d = *d + gi / v;
                        }
                    }
                });
            }
            Op::Mean { x } => {
                let n = nodes[x.0].shape.iter().product::<usize>().max(1);
                let share = g[0] / T::lit(n as f64);
                with_slot!(*x, |buf| buf.iter_mut().for_each(|d| *d = *d + share));
            }
            Op::Sum { x } => {
                let share = g[0];
                with_slot!(*x, |buf| buf.iter_mut().for_each(|d| *d = *d + share));
            }
            Op::SumCols { x, rows, cols } => {
                with_slot!(*x, |buf| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            buf[r * cols + c] = buf[r * cols + c] + g[r];
                        }
                    }
                });
            }
            Op::NormalizeRows { x, rows, cols } => {
                let xv = val(*x);
                let yv = node.value.as_deref().expect("value released");
                with_slot!(*x, |buf| {
                    for r in 0..*rows {
                        let row = r * cols..(r + 1) * cols;
                        let s = xv[row.clone()].iter().fold(T::zero(), |a, &b| a + b);
                        let gy: T = g[row.clone()]
                            .iter()
                            .zip(&yv[row.clone()])
                            .fold(T::zero(), |a, (&gi, &y)| a + gi * y);
                        for k in row {
                            buf[k] = buf[k] + (g[k] - gy) / s;
                        }
                    }
                });
            }
            Op::ConcatCols { parts, rows } => {
                let widths: Vec<usize> = parts.iter().map(|p| dims_of(&nodes[p.0].shape).1).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    with_slot!(p, |buf| {
                        for r in 0..*rows {
                            for c in 0..w {
                                buf[r * w + c] = buf[r * w + c] + g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols {
                x,
                start,
                end,
                rows,
                cols,
            } => {
                let w = end - start;
                with_slot!(*x, |buf| {
                    for r in 0..*rows {
                        for c in 0..w {
                            let k = r * cols + start + c;
                            buf[k] = buf[k] + g[r * w + c];
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                let gt = kernels::transpose(g, *cols, *rows);
                with_slot!(*x, |buf| {
                    for (d, s) in buf.iter_mut().zip(&gt) {
                        *d = *d + *s;
                    }
                });
            }
            Op::Fir { x, h } => {
                let (xv, hv) = (val(*x), val(*h));
                with_slot!(*x, |buf| kernels::fir_causal_backward(
                    xv,
                    hv,
                    g,
                    Some(buf.as_mut_slice()),
                    None
                ));
                with_slot!(*h, |buf| kernels::fir_causal_backward(
                    xv,
                    hv,
                    g,
                    None,
                    Some(buf.as_mut_slice())
                ));
            }
            Op::AvgPool {
                x,
                channels,
                t_in,
                kernel,
                stride,
                pad,
            } => {
                with_slot!(*x, |buf| kernels::avg_pool_rows_backward(
                    g, *channels, *t_in, *kernel, *stride, *pad, buf
                ));
            }
        }
    }
}

fn grad_slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let len = n.shape.iter().product();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn dims_of(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        s => (s[0], s[1..].iter().product()),
    }
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(i: usize, j: usize, rows: usize, cols: usize) -> usize {
    let r = if rows == 1 { 0 } else { i };
    let c = if cols == 1 { 0 } else { j };
    r * cols + c
}
