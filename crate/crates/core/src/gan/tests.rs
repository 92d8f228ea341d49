use super::*;
use crate::numcore::gradcheck::{check_params, CheckOptions, LossFn};
use crate::numcore::{kernels, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn tiny_disc() -> DiscriminatorConfig {
    DiscriminatorConfig {
        channels: vec![1, 2, 2, 2, 2],
        ..DiscriminatorConfig::default()
    }
}

fn noise(seed: u64, n: usize, amp: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-amp..amp)).collect()
}

fn vec_var(g: &mut Graph<f64>, v: &[f64]) -> Var {
    g.constant(Tensor::from_vec(v.to_vec()))
}

/// Direct-DFT STFT magnitude with the same framing conventions.
fn reference_stft(x: &[f64], n: usize) -> Vec<Vec<f64>> {
    let hop = n / 4;
    let pad = n / 2;
    let len = x.len();
    let at = |j: isize| -> f64 {
        let i = j - pad as isize;
        let i = if i < 0 { -i } else { i };
        let i = if i as usize >= len { 2 * (len as isize - 1) - i } else { i };
        x[i as usize]
    };
    let win: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    (0..1 + len / hop)
        .map(|f| {
            (0..=n / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (i, w) in win.iter().enumerate() {
                        let v = w * at((f * hop + i) as isize);
                        let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    (re * re + im * im + 1e-12).sqrt()
                })
                .collect()
        })
        .collect()
}

fn reference_l_mag(y: &[f64], h: &[f64], sizes: &[usize]) -> f64 {
    let mut total = 0.0;
    for &n in sizes {
        let (a, b) = (reference_stft(y, n), reference_stft(h, n));
        let count = (a.len() * a[0].len()) as f64;
        let mut lin = 0.0;
        let mut log = 0.0;
        for (ra, rb) in a.iter().zip(&b) {
            for (&p, &q) in ra.iter().zip(rb) {
                lin += (p - q).abs();
                log += (p.max(1e-7).ln() - q.max(1e-7).ln()).abs();
            }
        }
        total += lin / count + log / count;
    }
    total / sizes.len() as f64
}

#[test]
fn l_mag_identities() {
    let y = noise(1, 1024, 0.5);
    let mut g = Graph::<f64>::inference();
    let a = vec_var(&mut g, &y);
    let b = vec_var(&mut g, &y);
    let l = l_mag(&mut g, a, b, &[512, 256, 64]).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let z1 = vec_var(&mut g, &[0.0; 1024]);
    let z2 = vec_var(&mut g, &[0.0; 1024]);
    let l = l_mag(&mut g, z1, z2, &[512, 256, 64]).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let short = vec_var(&mut g, &[0.0; 1000]);
    assert!(l_mag(&mut g, a, short, &[64]).is_err());
}

#[test]
fn l_mag_matches_reference_dft() {
    let n = 512;
    let y: Vec<f64> = (0..n).map(|i| (2.0 * PI * 440.0 * i as f64 / 22050.0).sin()).collect();
    let h: Vec<f64> = y.iter().map(|v| 0.5 * v).collect();
    let sizes = [256, 128, 64];
    let mut g = Graph::<f64>::inference();
    let (a, b) = (vec_var(&mut g, &y), vec_var(&mut g, &h));
    let l = l_mag(&mut g, a, b, &sizes).unwrap();
    let want = reference_l_mag(&y, &h, &sizes);
    assert!((g.scalar(l) - want).abs() < 1e-5, "{} vs {want}", g.scalar(l));
}

#[test]
fn multi_stft_identities() {
    let y = noise(2, 1024, 0.5);
    let h = noise(3, 1024, 0.5);
    let o = noise(4, 1024, 0.5);
    let sizes = [512, 128];
    let mut g = Graph::<f64>::inference();
    let (yv, hv, ov) = (vec_var(&mut g, &y), vec_var(&mut g, &h), vec_var(&mut g, &o));
    let same = multi_stft_loss(&mut g, yv, yv, yv, &sizes).unwrap();
    assert_eq!(g.scalar(same), 0.0);
    let l1 = multi_stft_loss(&mut g, yv, hv, ov, &sizes).unwrap();
    let a = l_mag(&mut g, hv, yv, &sizes).unwrap();
    let b = l_mag(&mut g, ov, yv, &sizes).unwrap();
    assert!((g.scalar(l1) - (g.scalar(a) + g.scalar(b))).abs() < 1e-12);
    assert!(g.scalar(l1) > 0.0);
}

struct StftWrtOutput {
    y: Vec<f64>,
    o: Vec<f64>,
}

impl LossFn for StftWrtOutput {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> crate::Result<Var> {
        let lit = |v: &[f64]| Tensor::from_vec(v.iter().map(|&x| T::lit(x)).collect());
        let y = g.constant(lit(&self.y));
        let o = g.constant(lit(&self.o));
        let h = g.param(store, store.id("y_hat").unwrap());
        multi_stft_loss(g, y, h, o, &[256, 128, 64])
    }
}

#[test]
fn multi_stft_gradient_wrt_output() {
    let mut store = ParamStore::new();
    let id = store
        .insert(crate::numcore::ParamTensor::new("y_hat", vec![256], noise(35, 256, 0.5).iter().map(|&v| v as f32).collect()).unwrap())
        .unwrap();
    let loss = StftWrtOutput {
        y: noise(6, 256, 0.5),
        o: noise(7, 256, 0.5),
    };
    let r = &check_params(&loss, &store, &[id], &CheckOptions::default()).unwrap()[0];
    assert!(r.passed(), "{r:?}");
}

#[test]
fn default_architecture_has_seven_layers_per_scale() {
    let cfg = DiscriminatorConfig::default();
    assert_eq!(cfg.layers_per_scale(), 7);
    cfg.validate().unwrap();
    let bank = DiscriminatorBank::new(&DiscriminatorConfig::toy(), 0).unwrap();
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::from_vec(vec![0.1f32; 4096]));
    let outs = bank.discriminate(&mut g, x, false).unwrap();
    assert_eq!(outs.len(), 3);
    for s in &outs {
        assert_eq!(s.features.len() + 1, 7);
        assert_eq!(g.shape(s.output)[0], 1);
    }
}

#[test]
fn map_extent_scales_with_input_length() {
    let bank = DiscriminatorBank::new(&DiscriminatorConfig::toy(), 1).unwrap();
    let lens = |n: usize| -> Vec<usize> {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::from_vec(vec![0.05f32; n]));
        let outs = bank.discriminate(&mut g, x, false).unwrap();
        outs.iter()
            .flat_map(|s| s.features.iter().chain([&s.output]).map(|&v| g.shape(v)[1]).collect::<Vec<_>>())
            .collect()
    };
    for (a, b) in lens(4096).into_iter().zip(lens(8192)) {
        assert!(b.abs_diff(2 * a) <= 1, "{a} → {b}");
    }
}

#[test]
fn zero_weights_give_bias_maps() {
    let mut bank = DiscriminatorBank::new(&DiscriminatorConfig::toy(), 2).unwrap();
    for p in bank.store.iter_mut().filter(|p| p.name.ends_with(".weight")) {
        p.data.fill(0.0);
    }
    let mut g = Graph::<f32>::inference();
    let x = g.constant(Tensor::from_vec(noise(8, 2048, 1.0).iter().map(|&v| v as f32).collect()));
    for s in bank.discriminate(&mut g, x, false).unwrap() {
        for &m in s.features.iter().chain([&s.output]) {
            let (c, t) = g.dims2(m);
            for row in g.data(m).chunks_exact(t).take(c) {
                assert!(row.iter().all(|&v| v == row[0]));
            }
        }
    }
}

#[test]
fn scale_inputs_are_pooled_bit_exactly() {
    let bank = DiscriminatorBank::new(&DiscriminatorConfig::toy(), 3).unwrap();
    let x = noise(9, 3001, 1.0);
    let mut g = Graph::<f64>::inference();
    let xv = vec_var(&mut g, &x);
    let ins = bank.scale_inputs(&mut g, xv).unwrap();
    let mut prev = x.clone();
    for &v in &ins[1..] {
        let want = kernels::avg_pool_rows(&prev, 1, prev.len(), 4, 2, 1);
        assert_eq!(g.data(v), want.as_slice());
        prev = want;
    }
    let short = vec_var(&mut g, &[0.0; 100]);
    assert!(bank.discriminate(&mut g, short, false).is_err());
}

fn outputs(g: &mut Graph<f64>, values: &[Vec<f64>]) -> Vec<ScaleOutput> {
    values
        .iter()
        .map(|v| {
            let output = g.constant(Tensor::matrix(1, v.len(), v.clone()).unwrap());
            ScaleOutput {
                features: vec![],
                output,
            }
        })
        .collect()
}

#[test]
fn adversarial_and_discriminator_examples() {
    let mut g = Graph::<f64>::inference();
    let ones = outputs(&mut g, &[vec![1.0; 4], vec![1.0; 2], vec![1.0; 1]]);
    let zeros = outputs(&mut g, &[vec![0.0; 4], vec![0.0; 2], vec![0.0; 1]]);
    let halves = outputs(&mut g, &[vec![0.5; 4], vec![0.5; 2], vec![0.5; 1]]);
    let l = adversarial_loss(&mut g, &ones).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let l = adversarial_loss(&mut g, &zeros).unwrap();
    assert_eq!(g.scalar(l), 1.0);
    let l = adversarial_loss(&mut g, &halves).unwrap();
    assert_eq!(g.scalar(l), 0.25);
    let l = discriminator_loss(&mut g, &ones, &zeros).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let l = discriminator_loss(&mut g, &halves, &halves).unwrap();
    assert_eq!(g.scalar(l), 0.5);
}

#[test]
fn indifferent_discriminator_optimum_is_half() {
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=1000 {
        let c = i as f64 / 1000.0;
        let mut g = Graph::<f64>::inference();
        let o = outputs(&mut g, &[vec![c; 3], vec![c; 2]]);
        let l = discriminator_loss(&mut g, &o, &o).unwrap();
        if g.scalar(l) < best.0 {
            best = (g.scalar(l), c);
        }
    }
    assert_eq!(best.1, 0.5);
}

#[test]
fn discriminator_loss_descends_to_perfect_separation() {
    let mut store = ParamStore::new();
    let r = store.insert(crate::numcore::ParamTensor::new("real", vec![1], vec![0.3]).unwrap()).unwrap();
    let f = store.insert(crate::numcore::ParamTensor::new("fake", vec![1], vec![0.6]).unwrap()).unwrap();
    for _ in 0..500 {
        let mut g = Graph::<f32>::new();
        let (rv, fv) = (g.param(&store, r), g.param(&store, f));
        let real = [ScaleOutput { features: vec![], output: rv }];
        let fake = [ScaleOutput { features: vec![], output: fv }];
        let l = discriminator_loss(&mut g, &real, &fake).unwrap();
        let grads = g.backward(l).unwrap();
        for id in [r, f] {
            let gr = grads.get(id).unwrap()[0];
            store.get_mut(id).data[0] -= 0.1 * gr;
        }
    }
    assert!((store.get(r).data[0] - 1.0).abs() < 1e-4);
    assert!(store.get(f).data[0].abs() < 1e-4);
}

#[test]
fn feature_matching_examples() {
    let mut g = Graph::<f64>::inference();
    let map = |g: &mut Graph<f64>, v: [f64; 4]| g.constant(Tensor::matrix(1, 4, v.to_vec()).unwrap());
    let (a1, a2) = (map(&mut g, [1.0, 2.0, 3.0, 4.0]), map(&mut g, [0.0, 0.0, 0.0, 0.0]));
    let (b1, b2) = (map(&mut g, [1.0, 1.0, 1.0, 1.0]), map(&mut g, [1.0, -1.0, 2.0, -2.0]));
    let out = map(&mut g, [0.0; 4]);
    let real = [ScaleOutput { features: vec![a1, a2], output: out }];
    let fake = [ScaleOutput { features: vec![b1, b2], output: out }];
    // layer 1: |0|+|1|+|2|+|3| = 6 → 1.5; layer 2: 1+1+2+2 = 6 → 1.5
    let l = feature_matching_loss(&mut g, &real, &fake).unwrap();
    assert_eq!(g.scalar(l), 1.5);
    let same = feature_matching_loss(&mut g, &real, &real).unwrap();
    assert_eq!(g.scalar(same), 0.0);
    let short = [ScaleOutput { features: vec![b1], output: out }];
    assert!(feature_matching_loss(&mut g, &real, &short).is_err());
}

#[test]
fn generator_loss_weights() {
    let w = LossWeights::default();
    assert_eq!(generator_loss_value(1.0, 0.5, 0.01, &w), 4.0);
    assert_eq!(generator_loss_value(0.0, 0.0, 0.0, &w), 0.0);
    assert_eq!(w.tau * w.lambda, 100.0);
    let mut g = Graph::<f32>::inference();
    let s = |g: &mut Graph<f32>, v: f32| g.constant(Tensor::from_vec(vec![v]));
    let (a, b, c) = (s(&mut g, 1.0), s(&mut g, 0.5), s(&mut g, 0.01));
    let l = generator_loss(&mut g, a, b, c, &w).unwrap();
    assert_eq!(g.scalar(l), 4.0);
}

struct DiscLoss {
    bank: DiscriminatorBank,
    y: Vec<f64>,
    h: Vec<f64>,
}

impl LossFn for DiscLoss {
    fn build<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore) -> crate::Result<Var> {
        let bank = DiscriminatorBank {
            store: store.clone(),
            ..self.bank.clone()
        };
        let lit = |v: &[f64]| Tensor::from_vec(v.iter().map(|&x| T::lit(x)).collect());
        let y = g.constant(lit(&self.y));
        let h = g.constant(lit(&self.h));
        let real = bank.discriminate(g, y, true)?;
        let fake = bank.discriminate(g, h, true)?;
        discriminator_loss(g, &real, &fake)
    }
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let bank = DiscriminatorBank::new(&tiny_disc(), 4).unwrap();
    assert!(bank.num_parameters() < 5000);
    let store = bank.store.clone();
    let loss = DiscLoss {
        bank,
        y: noise(10, 1024, 0.5),
        h: noise(11, 1024, 0.5),
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for r in check_params(&loss, &store, &ids, &CheckOptions::default()).unwrap() {
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn groups_rule_and_validation() {
    assert_eq!(DiscriminatorConfig::groups(16), 4);
    assert_eq!(DiscriminatorConfig::groups(1024), 256);
    assert_eq!(DiscriminatorConfig::groups(2), 1);
    assert_eq!(DiscriminatorConfig::toy().channels, vec![1, 4, 16, 64, 64]);
    let bad = DiscriminatorConfig {
        channels: vec![12, 10],
        ..DiscriminatorConfig::default()
    };
    assert!(bad.validate().is_err());
}
