//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc.

use super::AudioBuffer;
use crate::error::{Error, Result};

/// Taps evaluated per output sample (per polyphase branch).
pub const TAPS_PER_BRANCH: usize = 64;
const KAISER_BETA: f64 = 8.0;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// One branch per output phase `p/up`; each branch's taps sum to one.
fn design_branches(up: usize, down: usize) -> Vec<[f32; TAPS_PER_BRANCH]> {
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half = (TAPS_PER_BRANCH / 2) as f64;
    let norm = bessel_i0(KAISER_BETA);
    (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps = [0.0f64; TAPS_PER_BRANCH];
            for (k, tap) in taps.iter_mut().enumerate() {
                // distance from the output instant to input sample i0 + k - (half - 1)
                let d = k as f64 - (half - 1.0) - frac;
                let r = d / half;
                let w = if r.abs() <= 1.0 {
                    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
                } else {
                    0.0
                };
                *tap = cutoff * sinc(cutoff * d) * w;
            }
            let s: f64 = taps.iter().sum();
            let mut out = [0.0f32; TAPS_PER_BRANCH];
            for (o, t) in out.iter_mut().zip(taps) {
                *o = (t / s) as f32;
            }
            out
        })
        .collect()
}

pub fn resample(audio: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer> {
    if target_rate == 0 || audio.sample_rate == 0 {
        return Err(Error::invalid(format!(
            "cannot resample {} Hz to {target_rate} Hz",
            audio.sample_rate
        )));
    }
    if target_rate == audio.sample_rate {
        return Ok(audio.clone());
    }
    let g = gcd(audio.sample_rate as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (audio.sample_rate as u64 / g) as usize;
    let branches = design_branches(up, down);
    let x = &audio.samples;
    let n_out = (x.len() * up).div_ceil(down);
    let half = TAPS_PER_BRANCH / 2;
    let mut out = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let pos = n * down;
        let i0 = pos / up;
        let taps = &branches[pos % up];
        let first = i0 as isize - (half as isize - 1);
        let mut acc = 0.0f32;
        for (k, &h) in taps.iter().enumerate() {
            let i = first + k as isize;
            if i >= 0 && (i as usize) < x.len() {
                acc += h * x[i as usize];
            }
        }
        out.push(acc);
    }
    Ok(AudioBuffer::new(out, target_rate))
}
