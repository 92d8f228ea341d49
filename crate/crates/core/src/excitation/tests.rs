use super::*;
use crate::numcore::gradcheck::{check_params, CheckOptions, LossFn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn features(frames: usize, n_mels: usize, f0: impl Fn(usize) -> f32) -> AcousticFeatures {
    let f0_hz: Vec<f32> = (0..frames).map(f0).collect();
    AcousticFeatures {
        mel: (0..frames * n_mels).map(|i| -((i % 7) as f32)).collect(),
        n_mels,
        uv: f0_hz.iter().map(|&v| u8::from(v > 0.0)).collect(),
        f0_hz,
        hop_samples: 8,
        sample_rate: 22050,
    }
}

#[test]
fn conditioning_layout() {
    let mut f = features(3, 80, |t| if t == 1 { 0.0 } else { 220.5 });
    let c = build_conditioning(&f).unwrap();
    assert_eq!(c.channels, 82);
    let row = |t: usize| &c.data[t * 82..(t + 1) * 82];
    assert!((row(0)[80] - 0.01).abs() < 1e-9);
    assert_eq!(row(0)[81], 1.0);
    assert_eq!(row(1)[81], 0.0);
    assert!(row(1)[80] > 0.0);
    assert_eq!(&row(2)[..80], f.mel_row(2));
    f.uv[0] = 0;
    assert!(build_conditioning(&f).is_err());
}

#[test]
fn encoder_shapes_and_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, 82, 256, &mut rng).unwrap();
    for frames in [1, 7, 40] {
        let c = build_conditioning(&features(frames, 80, |_| 100.0)).unwrap();
        let mut g = Graph::<f32>::inference();
        let cv = c.to_var(&mut g).unwrap();
        let out = enc.forward(&mut g, &store, cv, false).unwrap();
        assert_eq!(g.shape(out.h_osc), &[frames, 128]);
        assert_eq!(g.shape(out.h_noise), &[frames, 128]);
    }
    store.iter_mut().for_each(|p| p.data.fill(0.0));
    let c = build_conditioning(&features(5, 80, |_| 100.0)).unwrap();
    let mut g = Graph::<f32>::inference();
    let cv = c.to_var(&mut g).unwrap();
    let out = enc.forward(&mut g, &store, cv, false).unwrap();
    assert!(g.data(out.h_osc).iter().chain(g.data(out.h_noise)).all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(vec![5, 81]));
    assert!(enc.forward(&mut g, &store, bad, false).is_err());
    assert!(Encoder::new(&mut ParamStore::new(), 82, 7, &mut rng).is_err());
}

#[test]
fn harmonic_frequency_examples() {
    assert_eq!(harmonic_frequencies(&[0.01], 3).unwrap(), vec![0.01, 0.02, 0.03]);
    assert_eq!(harmonic_frequencies(&[0.0], 4).unwrap(), vec![0.0; 4]);
    let f = harmonic_frequencies(&[110.0 / 22050.0], 2).unwrap();
    assert!((f[1] - 0.009977).abs() < 5e-7);
    assert!(harmonic_frequencies(&[0.1], 0).is_err());
}

#[test]
fn mask_boundary_and_brute_force() {
    let f = harmonic_frequencies(&[150.0 / 22050.0], 23).unwrap();
    let m = harmonic_mask(&f, 22050.0);
    assert_eq!(m[21], 1.0);
    assert_eq!(m[22], 0.0);
    let f = harmonic_frequencies(&[40.0 / 22050.0], 10).unwrap();
    assert!(harmonic_mask(&f, 22050.0).iter().all(|&v| v == 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let f0: f64 = rng.random_range(20.0..700.0);
        let j: usize = rng.random_range(1..=64);
        let fv = harmonic_frequencies(&[f0 / 22050.0], j).unwrap();
        let m = harmonic_mask(&fv[j - 1..], 22050.0)[0];
        assert_eq!(m == 0.0, j as f64 * f0 > 3300.0, "f0 {f0} j {j}");
    }
}

#[test]
fn oscillator_controls_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let head = OscillatorHead::new(&mut store, 16, 8, &mut rng).unwrap();
    let mut g = Graph::<f64>::inference();
    let h = g.constant(Tensor::matrix(5, 16, (0..80).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect()).unwrap());
    let ctl = head.forward(&mut g, &store, h, 4, false).unwrap();
    assert_eq!(g.shape(ctl.a), &[20, 8]);
    for row in g.data(ctl.a).chunks_exact(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
    assert!(g.data(ctl.alpha).iter().all(|&v| v > 1e-7 && v < 2.0 + 1e-7));
    let p1 = draw_phases(&mut ChaCha8Rng::seed_from_u64(3), 8);
    let p2 = draw_phases(&mut ChaCha8Rng::seed_from_u64(3), 8);
    assert_eq!(p1, p2);
    assert!(p1.iter().all(|p| p.abs() <= PI));
    assert!(OscillatorHead::new(&mut ParamStore::new(), 16, 0, &mut rng).is_err());
}

#[test]
fn render_closed_form_sine() {
    let f = vec![0.25; 8];
    let p = render_harmonics(&f, &[1.0; 8], &[1.0; 8], &[1.0; 8], &[0.0]).unwrap();
    let want = [1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0];
    for (a, b) in p.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let p = render_harmonics(&f, &[1.0; 8], &[0.0; 8], &[1.0; 8], &[0.3]).unwrap();
    assert!(p.iter().all(|&v| v == 0.0));
    let f2: Vec<f64> = (0..12).map(|i| 0.01 * (i % 3 + 1) as f64).collect();
    let m: Vec<f64> = (0..12).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect();
    let p = render_harmonics(&f2, &m, &[0.5; 12], &[1.5; 4], &[0.1, 0.2, 0.3]).unwrap();
    assert!(p.iter().skip(1).step_by(3).all(|&v| v == 0.0));
    assert!(render_harmonics(&f2, &m, &[0.5; 11], &[1.5; 4], &[0.1, 0.2, 0.3]).is_err());
}

#[test]
fn phase_is_running_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = 3;
    let f: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..0.2)).collect();
    let theta = harmonic_phase(&f, k);
    for j in 0..k {
        let mut acc = 0.0;
        for i in 0..100 {
            acc += f[i * k + j];
            assert!((theta[i * k + j] - 2.0 * PI * acc).abs() < 1e-6);
            if i > 0 {
                assert!(theta[i * k + j] >= theta[(i - 1) * k + j]);
            }
        }
    }
}

#[test]
fn gate_examples() {
    let p: Vec<f64> = (1..=8).map(|v| v as f64).collect();
    assert_eq!(gate_unvoiced(&p, &[1, 1], 4, 1).unwrap(), p);
    assert!(gate_unvoiced(&p, &[0, 0], 4, 1).unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(
        gate_unvoiced(&p, &[1, 0], 4, 1).unwrap(),
        vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn carrier_matches_reference_render() {
    let f = features(6, 4, |t| if t == 3 { 0.0 } else { 180.0 + 40.0 * t as f32 });
    let k = 20;
    let phi = draw_phases(&mut ChaCha8Rng::seed_from_u64(8), k);
    let carrier = harmonic_carrier(&f, k, &phi).unwrap();
    let f0: Vec<f64> = interpolate_unvoiced(&f.f0_hz).iter().map(|&v| v as f64 / 22050.0).collect();
    let f0 = kernels::upsample_linear(&f0, 6, 1, 8);
    let fr = harmonic_frequencies(&f0, k).unwrap();
    let m = harmonic_mask(&fr, 22050.0);
    let p = render_harmonics(&fr, &m, &vec![1.0; fr.len()], &vec![1.0; f0.len()], &phi).unwrap();
    let o = gate_unvoiced(&p, &f.uv, 8, k).unwrap();
    for (a, b) in carrier.iter().zip(&o) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(carrier[3 * 8 * k..4 * 8 * k].iter().all(|&v| v == 0.0));
}

#[test]
fn unvoiced_input_has_no_harmonic_energy() {
    let f = features(5, 4, |_| 0.0);
    let carrier = harmonic_carrier(&f, 16, &[0.7; 16]).unwrap();
    assert_eq!(carrier.iter().map(|v| v * v).sum::<f64>(), 0.0);
}

#[test]
fn noise_gain_and_identity_fir() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let ns = NoiseShaper::new(&mut store, 8, &mut rng).unwrap();
    assert!((store.get(ns.gain).data[0] - 0.159155).abs() < 1e-6);
    let fir = &store.get(ns.fir).data;
    assert_eq!(fir.len(), 257);
    assert_eq!(fir[0], 1.0);
    assert!(fir[1..].iter().all(|v| v.abs() < 1e-3));

    store.get_mut(ns.fir).data = {
        let mut h = vec![0.0; 257];
        h[0] = 1.0;
        h
    };
    let n = 1_000_000;
    let noise = gaussian_noise(&mut ChaCha8Rng::seed_from_u64(11), n);
    let mut g = Graph::<f64>::inference();
    let beta = g.constant(Tensor::matrix(n, 1, vec![1.0; n]).unwrap());
    let z = ns.shape(&mut g, &store, beta, &noise, false).unwrap();
    let z = g.data(z);
    let mean = z.iter().sum::<f64>() / n as f64;
    let std = (z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    assert!((std - 0.159).abs() < 0.002, "std {std}");
    // identity FIR: output equals a·n exactly
    let a = store.get(ns.gain).data[0] as f64;
    assert!(z.iter().zip(&noise).take(1000).all(|(zv, nv)| (zv - a * nv).abs() < 1e-12));
}

#[test]
fn excitation_concatenation() {
    let mut g = Graph::<f64>::inference();
    let o = g.constant(Tensor::matrix(4, 8, (0..32).map(|v| v as f64 * 0.1).collect()).unwrap());
    let z = g.constant(Tensor::from_vec(vec![0.5, -0.5, 0.25, 0.0]));
    let i = assemble_excitation(&mut g, o, z).unwrap();
    assert_eq!(g.shape(i), &[4, 9]);
    let (od, zd, id) = (g.data(o).to_vec(), g.data(z).to_vec(), g.data(i).to_vec());
    for r in 0..4 {
        let sum_o: f64 = od[r * 8..(r + 1) * 8].iter().sum();
        let sum_i: f64 = id[r * 9..(r + 1) * 9].iter().sum();
        assert!((sum_i - (sum_o + zd[r])).abs() < 1e-12);
        assert_eq!(id[r * 9 + 8], zd[r]);
    }
    let zero = g.constant(Tensor::from_vec(vec![0.0; 4]));
    let i = assemble_excitation(&mut g, o, zero).unwrap();
    assert!(g.data(i).iter().skip(8).step_by(9).all(|&v| v == 0.0));
    let short = g.constant(Tensor::from_vec(vec![0.0; 3]));
    assert!(assemble_excitation(&mut g, o, short).is_err());
}

struct HarmonicEnergy {
    enc: Encoder,
    head: OscillatorHead,
    feats: AcousticFeatures,
    carrier: Vec<f64>,
}

impl LossFn for HarmonicEnergy {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> Result<Var> {
        let c = build_conditioning(&self.feats)?.to_var(g)?;
        let h = self.enc.forward(g, store, c, true)?;
        let ctl = self.head.forward(g, store, h.h_osc, self.feats.hop_samples, true)?;
        let p = gated_harmonics(g, &ctl, &self.carrier)?;
        let sq = g.square(p);
        Ok(g.sum(sq))
    }
}

#[test]
fn harmonic_energy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let feats = features(4, 3, |t| 150.0 + 30.0 * t as f32);
    let enc = Encoder::new(&mut store, 5, 4, &mut rng).unwrap();
    let head = OscillatorHead::new(&mut store, 2, 3, &mut rng).unwrap();
    let carrier = harmonic_carrier(&feats, 3, &draw_phases(&mut rng, 3)).unwrap();
    let loss = HarmonicEnergy { enc, head, feats, carrier };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let reports = check_params(&loss, &store, &ids, &CheckOptions::default()).unwrap();
    for r in &reports {
        assert!(r.passed(), "{r:?}");
    }
}
