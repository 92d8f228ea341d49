//! Short-time Fourier transform with center (reflect) padding and its adjoint.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Real;
use crate::error::{Error, Result};

/// Guard inside `|z| = sqrt(re² + im² + MAG_EPS)`.
pub const MAG_EPS: f64 = 1e-12;

/// Periodic Hann window of length `n`.
pub fn hann<T: Real>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        })
        .collect()
}

/// Maps an index into the reflect-padded signal back onto the original.
#[inline]
pub fn reflect_index(j: usize, pad: usize, len: usize) -> usize {
    let i = j as isize - pad as isize;
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftGeom {
    pub fft_size: usize,
    pub hop: usize,
    pub len: usize,
    pub frames: usize,
    pub bins: usize,
}

impl StftGeom {
    pub fn new(len: usize, fft_size: usize, hop: usize) -> Result<Self> {
        if fft_size < 2 || !fft_size.is_power_of_two() {
            return Err(Error::invalid(format!(
                "fft size {fft_size} is not a power of two"
            )));
        }
        if hop == 0 {
            return Err(Error::invalid("stft hop must be positive"));
        }
        let pad = fft_size / 2;
        if len <= pad {
            return Err(Error::invalid(format!(
                "signal of {len} samples is shorter than one {fft_size}-point window after padding"
            )));
        }
        Ok(Self {
            fft_size,
            hop,
            len,
            frames: 1 + len / hop,
            bins: fft_size / 2 + 1,
        })
    }
}

/// Complex one-sided spectra, `[frames × bins]`.
pub fn stft_complex<T: Real>(
    x: &[T],
    geom: &StftGeom,
    window: &[T],
    planner: &mut FftPlanner<T>,
) -> Vec<Complex<T>> {
    let n = geom.fft_size;
    let pad = n / 2;
    let fft = planner.plan_fft_forward(n);
    let mut out = Vec::with_capacity(geom.frames * geom.bins);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for f in 0..geom.frames {
        let start = f * geom.hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            let v = x[reflect_index(start + k, pad, geom.len)];
            *slot = Complex::new(v * window[k], T::zero());
        }
        fft.process(&mut buf);
        out.extend_from_slice(&buf[..geom.bins]);
    }
    out
}

pub fn magnitudes<T: Real>(spec: &[Complex<T>]) -> Vec<T> {
    let eps = T::lit(MAG_EPS);
    spec.iter()
        .map(|z| (z.re * z.re + z.im * z.im + eps).sqrt())
        .collect()
}

/// Adds the adjoint of `x -> |STFT(x)|` applied to `gmag` into `dx`.
pub fn stft_magnitude_backward<T: Real>(
    spec: &[Complex<T>],
    mags: &[T],
    gmag: &[T],
    geom: &StftGeom,
    window: &[T],
    planner: &mut FftPlanner<T>,
    dx: &mut [T],
) {
    let n = geom.fft_size;
    let pad = n / 2;
    let ifft = planner.plan_fft_inverse(n);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    for f in 0..geom.frames {
        buf.iter_mut()
            .for_each(|z| *z = Complex::new(T::zero(), T::zero()));
        let row = f * geom.bins;
        let mut any = false;
        for b in 0..geom.bins {
            let g = gmag[row + b];
            if g != T::zero() {
                any = true;
            }
            let scale = g / mags[row + b];
            buf[b] = spec[row + b] * scale;
        }
        if !any {
            continue;
        }
        ifft.process(&mut buf);
        let start = f * geom.hop;
        for k in 0..n {
            let idx = reflect_index(start + k, pad, geom.len);
            dx[idx] = dx[idx] + window[k] * buf[k].re;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_convention() {
        // [a b c d] padded by 2 -> [c b a b c d c b]
        let mapped: Vec<usize> = (0..8).map(|j| reflect_index(j, 2, 4)).collect();
        assert_eq!(mapped, vec![2, 1, 0, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn frame_count_center_padding() {
        let g = StftGeom::new(11000, 2048, 512).unwrap();
        assert_eq!(g.frames, 1 + 11000 / 512);
        assert_eq!(g.bins, 1025);
        assert!(StftGeom::new(1024, 2048, 512).is_err());
        assert!(StftGeom::new(4096, 1000, 250).is_err());
    }
}
