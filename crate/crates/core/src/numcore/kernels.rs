//! Forward and adjoint kernels over flat slices.
//!
//! Layout conventions: convolutions and pooling take `[channels × time]`
//! (time contiguous); `linear`, upsampling and `cumsum_rows` take
//! `[time × channels]` row-major.

use rayon::prelude::*;

use super::Real;

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *xa * *xb;
    }
    let pairs = [
        acc[0] + acc[4],
        acc[1] + acc[5],
        acc[2] + acc[6],
        acc[3] + acc[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// Geometry of a 1-D convolution over `[c_in × t_in]` producing `[c_out × t_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Output index range `[lo, hi)` whose input tap `o*stride + off` is in bounds.
    #[inline]
    fn valid_range(&self, tap: usize) -> (usize, usize, isize) {
        let off = (tap * self.dilation) as isize - self.pad_left as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let rem = self.t_in as isize - off;
        let hi = if rem <= 0 { 0 } else { (rem + s - 1) / s };
        let hi = hi.min(self.t_out as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize, off)
    }
}

pub fn conv1d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom, out: &mut [T]) {
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let k = g.kernel;
    out.par_chunks_mut(g.t_out)
        .enumerate()
        .for_each(|(co, row)| {
            let b = bias.map_or(T::zero(), |b| b[co]);
            row.iter_mut().for_each(|v| *v = b);
            let ci0 = (co / cout_g) * cin_g;
            for cig in 0..cin_g {
                let xrow = &x[(ci0 + cig) * g.t_in..(ci0 + cig + 1) * g.t_in];
                let wrow = &w[(co * cin_g + cig) * k..(co * cin_g + cig + 1) * k];
                for (tap, &wv) in wrow.iter().enumerate() {
                    let (lo, hi, off) = g.valid_range(tap);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        axpy(wv, &xrow[start..start + (hi - lo)], &mut row[lo..hi]);
                    } else {
                        for o in lo..hi {
                            let idx = (o as isize * g.stride as isize + off) as usize;
                            row[o] = row[o] + wv * xrow[idx];
                        }
                    }
                }
            }
        });
}

/// Accumulates adjoints of `conv1d_forward` into whichever buffers are given.
pub fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &ConvGeom,
    gout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let k = g.kernel;
    if let Some(dx) = dx {
        dx.par_chunks_mut(g.t_in).enumerate().for_each(|(ci, dxrow)| {
            let grp = ci / cin_g;
            let cig = ci % cin_g;
            for co in grp * cout_g..(grp + 1) * cout_g {
                let grow = &gout[co * g.t_out..(co + 1) * g.t_out];
                let wrow = &w[(co * cin_g + cig) * k..(co * cin_g + cig + 1) * k];
                for (tap, &wv) in wrow.iter().enumerate() {
                    let (lo, hi, off) = g.valid_range(tap);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        axpy(wv, &grow[lo..hi], &mut dxrow[start..start + (hi - lo)]);
                    } else {
                        for o in lo..hi {
                            let idx = (o as isize * g.stride as isize + off) as usize;
                            dxrow[idx] = dxrow[idx] + wv * grow[o];
                        }
                    }
                }
            }
        });
    }
    if let Some(dw) = dw {
        dw.par_chunks_mut(cin_g * k).enumerate().for_each(|(co, dwco)| {
            let grow = &gout[co * g.t_out..(co + 1) * g.t_out];
            let ci0 = (co / cout_g) * cin_g;
            for cig in 0..cin_g {
                let xrow = &x[(ci0 + cig) * g.t_in..(ci0 + cig + 1) * g.t_in];
                for tap in 0..k {
                    let (lo, hi, off) = g.valid_range(tap);
                    if lo >= hi {
                        continue;
                    }
                    let acc = if g.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        dot(&grow[lo..hi], &xrow[start..start + (hi - lo)])
                    } else {
                        let mut acc = T::zero();
                        for o in lo..hi {
                            let idx = (o as isize * g.stride as isize + off) as usize;
                            acc = acc + grow[o] * xrow[idx];
                        }
                        acc
                    };
                    let slot = &mut dwco[cig * k + tap];
                    *slot = *slot + acc;
                }
            }
        });
    }
    if let Some(db) = db {
        for (co, slot) in db.iter_mut().enumerate() {
            let s: T = gout[co * g.t_out..(co + 1) * g.t_out]
                .iter()
                .fold(T::zero(), |a, &b| a + b);
            *slot = *slot + s;
        }
    }
}

/// `out[t] = w · x[t] + b` for `x: [rows × c_in]`, `w: [c_out × c_in]`.
pub fn linear_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    rows: usize,
    c_in: usize,
    c_out: usize,
    out: &mut [T],
) {
    for t in 0..rows {
        let xr = &x[t * c_in..(t + 1) * c_in];
        let or = &mut out[t * c_out..(t + 1) * c_out];
        for (co, o) in or.iter_mut().enumerate() {
            let b = bias.map_or(T::zero(), |b| b[co]);
            *o = b + dot(xr, &w[co * c_in..(co + 1) * c_in]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    rows: usize,
    c_in: usize,
    c_out: usize,
    gout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    for t in 0..rows {
        let xr = &x[t * c_in..(t + 1) * c_in];
        let gr = &gout[t * c_out..(t + 1) * c_out];
        for (co, &gv) in gr.iter().enumerate() {
            if let Some(dx) = dx.as_deref_mut() {
                axpy(gv, &w[co * c_in..(co + 1) * c_in], &mut dx[t * c_in..(t + 1) * c_in]);
            }
            if let Some(dw) = dw.as_deref_mut() {
                axpy(gv, xr, &mut dw[co * c_in..(co + 1) * c_in]);
            }
            if let Some(db) = db.as_deref_mut() {
                db[co] = db[co] + gv;
            }
        }
    }
}

/// Linear interpolation between frame anchors; frame `r` lands on row `r*factor`,
/// rows after the last anchor hold its value.
pub fn upsample_linear<T: Real>(x: &[T], rows: usize, cols: usize, factor: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * factor * cols];
    let inv = T::lit(1.0 / factor as f64);
    for r in 0..rows {
        let cur = &x[r * cols..(r + 1) * cols];
        let next = if r + 1 < rows {
            &x[(r + 1) * cols..(r + 2) * cols]
        } else {
            cur
        };
        for s in 0..factor {
            let frac = T::lit(s as f64) * inv;
            let o = &mut out[(r * factor + s) * cols..(r * factor + s + 1) * cols];
            for c in 0..cols {
                o[c] = cur[c] + (next[c] - cur[c]) * frac;
            }
        }
    }
    out
}

pub fn upsample_linear_backward<T: Real>(
    gout: &[T],
    rows: usize,
    cols: usize,
    factor: usize,
    dx: &mut [T],
) {
    let inv = T::lit(1.0 / factor as f64);
    for r in 0..rows {
        for s in 0..factor {
            let frac = T::lit(s as f64) * inv;
            let g = &gout[(r * factor + s) * cols..(r * factor + s + 1) * cols];
            if r + 1 < rows {
                for c in 0..cols {
                    dx[r * cols + c] = dx[r * cols + c] + g[c] * (T::one() - frac);
                    dx[(r + 1) * cols + c] = dx[(r + 1) * cols + c] + g[c] * frac;
                }
            } else {
                for c in 0..cols {
                    dx[r * cols + c] = dx[r * cols + c] + g[c];
                }
            }
        }
    }
}

pub fn upsample_nearest<T: Real>(x: &[T], rows: usize, cols: usize, factor: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * factor * cols);
    for r in 0..rows {
        for _ in 0..factor {
            out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Real>(
    gout: &[T],
    rows: usize,
    cols: usize,
    factor: usize,
    dx: &mut [T],
) {
    for r in 0..rows {
        for s in 0..factor {
            let g = &gout[(r * factor + s) * cols..(r * factor + s + 1) * cols];
            for c in 0..cols {
                dx[r * cols + c] = dx[r * cols + c] + g[c];
            }
        }
    }
}

/// Running sum down the rows of `[rows × cols]`.
pub fn cumsum_rows<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for r in 1..rows {
        let (prev, cur) = out.split_at_mut(r * cols);
        let prev = &prev[(r - 1) * cols..];
        for c in 0..cols {
            cur[c] = cur[c] + prev[c];
        }
    }
    out
}

/// Adjoint of [`cumsum_rows`]: a reverse running sum.
pub fn cumsum_rows_backward<T: Real>(gout: &[T], rows: usize, cols: usize, dx: &mut [T]) {
    let mut acc = vec![T::zero(); cols];
    for r in (0..rows).rev() {
        for c in 0..cols {
            acc[c] = acc[c] + gout[r * cols + c];
            dx[r * cols + c] = dx[r * cols + c] + acc[c];
        }
    }
}

/// Causal FIR: `y[t] = Σ_m h[m]·x[t−m]`, truncated to `x.len()`.
pub fn fir_causal<T: Real>(x: &[T], h: &[T]) -> Vec<T> {
    let n = x.len();
    let mut y = vec![T::zero(); n];
    for (m, &hm) in h.iter().enumerate() {
        if m >= n {
            break;
        }
        axpy(hm, &x[..n - m], &mut y[m..]);
    }
    y
}

pub fn fir_causal_backward<T: Real>(
    x: &[T],
    h: &[T],
    gout: &[T],
    dx: Option<&mut [T]>,
    dh: Option<&mut [T]>,
) {
    let n = x.len();
    if let Some(dx) = dx {
        for (m, &hm) in h.iter().enumerate() {
            if m >= n {
                break;
            }
            axpy(hm, &gout[m..], &mut dx[..n - m]);
        }
    }
    if let Some(dh) = dh {
        for (m, slot) in dh.iter_mut().enumerate() {
            if m >= n {
                break;
            }
            *slot = *slot + dot(&gout[m..], &x[..n - m]);
        }
    }
}

/// Output length of [`avg_pool_rows`].
pub fn avg_pool_len(t_in: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    if t_in + 2 * pad < kernel {
        0
    } else {
        (t_in + 2 * pad - kernel) / stride + 1
    }
}

/// Average pooling along time of `[channels × t_in]`; padded taps are excluded
/// from the divisor.
pub fn avg_pool_rows<T: Real>(
    x: &[T],
    channels: usize,
    t_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let t_out = avg_pool_len(t_in, kernel, stride, pad);
    let mut out = vec![T::zero(); channels * t_out];
    for c in 0..channels {
        let row = &x[c * t_in..(c + 1) * t_in];
        for o in 0..t_out {
            let (lo, hi) = pool_window(o, t_in, kernel, stride, pad);
            let s = row[lo..hi].iter().fold(T::zero(), |a, &b| a + b);
            out[c * t_out + o] = s / T::lit((hi - lo) as f64);
        }
    }
    out
}

pub fn avg_pool_rows_backward<T: Real>(
    gout: &[T],
    channels: usize,
    t_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let t_out = avg_pool_len(t_in, kernel, stride, pad);
    for c in 0..channels {
        for o in 0..t_out {
            let (lo, hi) = pool_window(o, t_in, kernel, stride, pad);
            let share = gout[c * t_out + o] / T::lit((hi - lo) as f64);
            for v in &mut dx[c * t_in + lo..c * t_in + hi] {
                *v = *v + share;
            }
        }
    }
}

#[inline]
fn pool_window(o: usize, t_in: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as isize).max(0) as usize).min(t_in);
    (lo, hi.max(lo + 1).min(t_in))
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for rb in (0..rows).step_by(B) {
        for cb in (0..cols).step_by(B) {
            for r in rb..(rb + B).min(rows) {
                for c in cb..(cb + B).min(cols) {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
    out
}
