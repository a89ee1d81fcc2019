mod common;

use common::*;
use kato_core::gp::{FitConfig, GpModel};
use kato_core::kernel::{ArdKernel, Kernel};
use kato_core::linalg::min_eigenvalue;
use kato_core::neuk::{gram_min_eigenvalue, BaseKind, NeuralKernel};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

/// Kernel with every parameter perturbed from its initial value.
fn random_kernel(seed: u64, d_in: usize, d_latent: usize) -> NeuralKernel {
    let mut r = rng(seed);
    let mut k = NeuralKernel::initialize(d_in, d_latent, seed);
    let mut p = k.params();
    for v in p.iter_mut() {
        *v += 0.3 * normal(&mut r);
    }
    k.set_params(&p);
    k
}

/// Straight-line composition: warp each input, evaluate each base kernel
/// from its written-out formula, combine, exponentiate.
fn oracle(k: &NeuralKernel, a: &[f64], b: &[f64]) -> f64 {
    let w = k.combiner_weights();
    let mut e = k.combiner_bias() + k.output_bias();
    for (s, slot) in k.slots().iter().enumerate() {
        let warp = |x: &[f64]| -> Vec<f64> {
            (0..slot.d_latent)
                .map(|i| slot.warp_bias[i] + (0..slot.d_in).map(|j| slot.warp_weight[i * slot.d_in + j] * x[j]).sum::<f64>())
                .collect()
        };
        let (u, v) = (warp(a), warp(b));
        let r2: f64 = u.iter().zip(&v).map(|(p, q)| (p - q).powi(2)).sum();
        let h = match slot.kind {
            BaseKind::Linear => slot.log_hyper[0].exp() * u.iter().zip(&v).map(|(p, q)| p * q).sum::<f64>(),
            BaseKind::Rbf => {
                let (amp, l) = (slot.log_hyper[0].exp(), slot.log_hyper[1].exp());
                amp * (-r2 / (2.0 * l * l)).exp()
            }
            BaseKind::Rq => {
                let (amp, l, alpha) = (slot.log_hyper[0].exp(), slot.log_hyper[1].exp(), slot.log_hyper[2].exp());
                amp * (1.0 + r2 / (2.0 * alpha * l * l)).powf(-alpha)
            }
        };
        e += w[s] * h;
    }
    e.exp()
}

#[test]
fn evaluation_matches_straight_line_oracle() {
    for seed in 0..20 {
        let k = random_kernel(seed, 3, 4);
        let mut r = rng(1000 + seed);
        let a: Vec<f64> = (0..3).map(|_| r.random()).collect();
        let b: Vec<f64> = (0..3).map(|_| r.random()).collect();
        let got = k.evaluate(&a, &b).unwrap();
        let want = oracle(&k, &a, &b);
        assert!((got - want).abs() <= 1e-12 * want, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn initialization_is_deterministic() {
    let a = NeuralKernel::initialize(5, 3, 42);
    let b = NeuralKernel::initialize(5, 3, 42);
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), NeuralKernel::initialize(5, 3, 43).params());
}

#[test]
fn initial_self_similarity_lies_between_one_and_e() {
    let k = NeuralKernel::initialize(4, 4, 7);
    // Interval bound of the exponent over the unit cube at the initial values.
    let w = k.combiner_weights();
    let mut upper = k.combiner_bias() + k.output_bias();
    for (s, slot) in k.slots().iter().enumerate() {
        let h_max = match slot.kind {
            BaseKind::Linear => {
                let norm2: f64 = (0..slot.d_latent)
                    .map(|i| {
                        let row = &slot.warp_weight[i * slot.d_in..(i + 1) * slot.d_in];
                        let lo = slot.warp_bias[i] + row.iter().map(|v| v.min(0.0)).sum::<f64>();
                        let hi = slot.warp_bias[i] + row.iter().map(|v| v.max(0.0)).sum::<f64>();
                        lo.abs().max(hi.abs()).powi(2)
                    })
                    .sum();
                slot.log_hyper[0].exp() * norm2
            }
            BaseKind::Rbf | BaseKind::Rq => slot.log_hyper[0].exp(),
        };
        upper += w[s] * h_max;
    }
    assert!(upper <= 1.0, "exponent bound {upper}");
    let mut r = rng(8);
    for _ in 0..200 {
        let x: Vec<f64> = (0..4).map(|_| r.random()).collect();
        let v = k.evaluate(&x, &x).unwrap();
        assert!((1.0..=std::f64::consts::E).contains(&v), "{v}");
    }
}

#[test]
fn expanding_latent_dimension_is_finite_and_symmetric() {
    let k = NeuralKernel::initialize(2, 6, 3);
    let (a, b) = ([0.1, 0.9], [0.7, 0.2]);
    let v = k.evaluate(&a, &b).unwrap();
    assert!(v.is_finite() && v > 0.0);
    assert_eq!(v, k.evaluate(&b, &a).unwrap());
}

#[test]
fn duplicate_rows_keep_gram_psd() {
    let k = random_kernel(5, 3, 3);
    let mut r = rng(6);
    let base = uniform_matrix(&mut r, 10, 3);
    let x = nalgebra::DMatrix::from_fn(20, 3, |i, j| base[(i % 10, j)]);
    let g = k.gram(&x);
    assert!(min_eigenvalue(&g) >= -1e-8 * g.trace());
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(200 + seed);
        let d = 2 + (seed as usize % 2);
        let x = uniform_matrix(&mut r, 12, d);
        let y = DVector::from_fn(12, |i, _| (4.0 * x[(i, 0)]).sin() + 0.3 * normal(&mut r));
        let k = random_kernel(300 + seed, d, d);
        let m = GpModel::new(x, y, k, 0.05).unwrap();
        let (_, g) = m.log_marginal_likelihood_grad();
        let fd = central_diff(|p| m.with_params(p).unwrap().log_marginal_likelihood(), &m.params(), 1e-5);
        let e = rel_err(&g, &fd);
        assert!(e < 1e-4, "seed {seed}: relative error {e}");
    }
}

#[test]
fn training_improves_likelihood_on_rbf_data() {
    for seed in 0..5 {
        let mut r = rng(400 + seed);
        let x = uniform_matrix(&mut r, 25, 2);
        let n = x.nrows();
        let kx = ArdKernel::new(1.0, &[0.3, 0.3]).gram(&x) + nalgebra::DMatrix::identity(n, n) * 1e-4;
        let l = kx.cholesky().unwrap().l();
        let y = l * DVector::from_fn(n, |_, _| normal(&mut r));
        let m = GpModel::new(x, y, NeuralKernel::initialize(2, 2, seed), 1e-2).unwrap();
        let fitted = m.fit(&FitConfig {
            steps: 200,
            restarts: 0,
            learning_rate: 0.01,
            seed,
        });
        assert!(
            fitted.log_marginal_likelihood() > m.log_marginal_likelihood(),
            "seed {seed}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluation_is_symmetric(seed in 0u64..10_000, a in prop::collection::vec(-2.0f64..2.0, 3), b in prop::collection::vec(-2.0f64..2.0, 3)) {
        let k = random_kernel(seed, 3, 2);
        prop_assert_eq!(k.evaluate(&a, &b).unwrap(), k.evaluate(&b, &a).unwrap());
    }

    #[test]
    fn gram_is_psd(seed in 0u64..10_000) {
        let k = random_kernel(seed, 3, 3);
        let x = uniform_matrix(&mut rng(seed ^ 0xABCD), 30, 3);
        let g = k.gram(&x);
        prop_assert!(gram_min_eigenvalue(&k, &x) >= -1e-6 * g.trace());
    }
}
