//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths under test beyond building inputs.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

pub fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Posterior mean and latent variance through an explicit inverse of
/// `K + σ²I`. `k_cross` is `n × q` (train × query).
pub fn dense_posterior(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_diag: &[f64],
    y: &DVector<f64>,
    noise: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = k_train.nrows();
    let a = k_train + DMatrix::identity(n, n) * noise;
    let inv = a.try_inverse().expect("oracle matrix is invertible");
    let w = &inv * k_cross;
    let mean = (k_cross.transpose() * (&inv * y)).iter().copied().collect();
    let var = (0..k_cross.ncols())
        .map(|j| k_diag[j] - k_cross.column(j).dot(&w.column(j)))
        .collect();
    (mean, var)
}

/// `-½ yᵀA⁻¹y - ½ ln det A - (n/2) ln 2π` from an explicit determinant and inverse.
pub fn dense_log_likelihood(k_train: &DMatrix<f64>, y: &DVector<f64>, noise: f64) -> f64 {
    let n = k_train.nrows();
    let a = k_train + DMatrix::identity(n, n) * noise;
    let det = a.determinant();
    let inv = a.try_inverse().expect("oracle matrix is invertible");
    -0.5 * y.dot(&(&inv * y)) - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Central differences with step `rel·max(|p_i|, 1)`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, p: &[f64], rel: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            let h = rel * p[i].abs().max(1.0);
            q[i] = p[i] + h;
            let up = f(&q);
            q[i] = p[i] - h;
            let down = f(&q);
            q[i] = p[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖b‖, 1e-8)` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

/// Indices not dominated by any other point (maximization), by direct
/// pairwise comparison.
pub fn brute_front0(points: &[[f64; 3]]) -> Vec<usize> {
    let dominated = |a: &[f64; 3], b: &[f64; 3]| {
        (0..3).all(|k| b[k] >= a[k]) && (0..3).any(|k| b[k] > a[k])
    };
    (0..points.len())
        .filter(|&i| !(0..points.len()).any(|j| j != i && dominated(&points[i], &points[j])))
        .collect()
}

/// Standard normal draws via Box–Muller on the given generator.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Squared-exponential ARD kernel written out directly:
/// `θ0 · exp(-Σ (a_i - b_i)² / ℓ_i²)`.
pub fn ard(amplitude: f64, lengthscales: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| (x - y) * (x - y) / (l * l))
        .sum();
    amplitude * (-s).exp()
}

pub fn ard_gram(amplitude: f64, ls: &[f64], xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(xa.nrows(), xb.nrows(), |i, j| ard(amplitude, ls, &row(xa, i), &row(xb, j)))
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn phi_cdf(z: f64) -> f64 {
    let n = 20_000;
    let h = z / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(z);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
    }
    0.5 + s * h / 3.0
}
