//! Source-excitation neural vocoder.
//!
//! A harmonic oscillator and a shaped noise source, both driven by an
//! encoder over mel frames, F0 and voicing, produce an excitation signal
//! that a simplified WaveNet and a learned output FIR filter into speech.
//! The crate covers feature extraction, the generator, multi-scale
//! discriminators, spectral and adversarial losses, RAdam training with
//! checkpointing, and gradient verification.

pub mod error;
pub mod excitation;
pub mod features;
pub mod filter;
pub mod gan;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
