//! Covariance functions and their vector-Jacobian products.
//!
//! A [`Kernel`] exposes its hyperparameters as a flat vector of
//! unconstrained reals. Each implementation documents the transform that
//! maps that vector to the constrained values it uses internally. Gradients
//! are provided as vector-Jacobian products: given the gradient of a scalar
//! loss with respect to every entry of a covariance matrix, return the
//! gradient with respect to the hyperparameters and the inputs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gradients produced by [`Kernel::cross_vjp`].
#[derive(Clone, Debug)]
pub struct CrossGrad {
    pub params: Vec<f64>,
    pub xa: DMatrix<f64>,
    pub xb: DMatrix<f64>,
}

pub trait Kernel: Clone + Send + Sync + std::fmt::Debug {
    fn input_dim(&self) -> usize;

    fn n_params(&self) -> usize;

    /// Unconstrained parameter vector.
    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]);

    /// Box bounds on the unconstrained parameters (infinite when free).
    fn param_bounds(&self) -> Vec<(f64, f64)>;

    fn eval(&self, a: &[f64], b: &[f64]) -> f64;

    /// Re-draws the parameters for an optimizer restart.
    fn randomize<R: Rng>(&mut self, rng: &mut R);

    /// `K[i, j] = k(xa_i, xb_j)`.
    fn cross(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> DMatrix<f64> {
        let ra = RowMajor::from_matrix(xa);
        let rb = RowMajor::from_matrix(xb);
        DMatrix::from_fn(xa.nrows(), xb.nrows(), |i, j| self.eval(ra.row(i), rb.row(j)))
    }

    /// Symmetric Gram matrix; each off-diagonal pair is evaluated once and
    /// written to both triangles.
    fn gram(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let r = RowMajor::from_matrix(x);
        let n = x.nrows();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.eval(r.row(i), r.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// `k(x_i, x_i)` for each row.
    fn diag(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let r = RowMajor::from_matrix(x);
        DVector::from_fn(x.nrows(), |i, _| self.eval(r.row(i), r.row(i)))
    }

    /// Gradient of `Σ_ij g_ij k(xa_i, xb_j)` with respect to parameters and
    /// both input sets.
    fn cross_vjp(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>, g: &DMatrix<f64>) -> CrossGrad;

    /// Gradient of `Σ_ij g_ij K_ij` for the Gram matrix of `x` with respect to
    /// the parameters.
    fn gram_vjp(&self, x: &DMatrix<f64>, g: &DMatrix<f64>) -> Vec<f64> {
        self.cross_vjp(x, x, g).params
    }

    /// Gradient of `Σ_i g_i k(x_i, x_i)` with respect to parameters and `x`.
    fn diag_vjp(&self, x: &DMatrix<f64>, g: &DVector<f64>) -> (Vec<f64>, DMatrix<f64>);
}

/// Assembles the Gram matrix and rejects non-finite entries.
pub fn assemble_gram<K: Kernel>(kernel: &K, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty point set".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite input coordinate".into()));
    }
    let k = kernel.gram(x);
    for j in 0..k.ncols() {
        for i in 0..k.nrows() {
            let v = k[(i, j)];
            if !v.is_finite() {
                return Err(Error::KernelEvaluation { i, j, value: v });
            }
        }
    }
    Ok(k)
}

/// Row-major copy of a point matrix, so rows are contiguous slices.
#[derive(Clone, Debug)]
pub struct RowMajor {
    data: Vec<f64>,
    d: usize,
}

impl RowMajor {
    pub fn from_matrix(x: &DMatrix<f64>) -> Self {
        let (n, d) = x.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(x[(i, j)]);
            }
        }
        Self { data, d }
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            data: vec![0.0; n * d],
            d,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn nrows(&self) -> usize {
        if self.d == 0 {
            0
        } else {
            self.data.len() / self.d
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.nrows();
        DMatrix::from_fn(n, self.d, |i, j| self.data[i * self.d + j])
    }
}

pub(crate) const LOG_LENGTHSCALE_BOUNDS: (f64, f64) = (-6.907_755_278_982_137, 6.907_755_278_982_137);

/// Squared-exponential kernel with one relevance weight per dimension:
/// `k(x, x') = θ0 · exp(-Σ_j θ_j (x_j - x'_j)²)` where `θ_j = 1 / ℓ_j²`.
///
/// Parameters are `[ln θ0, ln ℓ_1, …, ln ℓ_d]`; lengthscales are bounded to
/// `[1e-3, 1e3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArdKernel {
    log_amplitude: f64,
    log_lengthscales: Vec<f64>,
}

impl ArdKernel {
    pub fn new(amplitude: f64, lengthscales: &[f64]) -> Self {
        assert!(amplitude > 0.0 && lengthscales.iter().all(|l| *l > 0.0));
        Self {
            log_amplitude: amplitude.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    /// Builds from the amplitude and inverse-squared lengthscales `θ_1..θ_d`.
    pub fn from_relevances(amplitude: f64, relevances: &[f64]) -> Self {
        let ls: Vec<f64> = relevances.iter().map(|t| 1.0 / t.sqrt()).collect();
        Self::new(amplitude, &ls)
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    fn relevances(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| (-2.0 * l).exp()).collect()
    }
}

impl Kernel for ArdKernel {
    fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    fn n_params(&self) -> usize {
        1 + self.log_lengthscales.len()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = vec![self.log_amplitude];
        p.extend_from_slice(&self.log_lengthscales);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        self.log_amplitude = params[0];
        self.log_lengthscales.copy_from_slice(&params[1..]);
    }

    fn param_bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(-13.8, 13.8)];
        b.extend(std::iter::repeat_n(LOG_LENGTHSCALE_BOUNDS, self.input_dim()));
        b
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for (j, l) in self.log_lengthscales.iter().enumerate() {
            let d = a[j] - b[j];
            s += d * d * (-2.0 * l).exp();
        }
        self.log_amplitude.exp() * (-s).exp()
    }

    fn randomize<R: Rng>(&mut self, rng: &mut R) {
        self.log_amplitude = 0.0;
        for l in self.log_lengthscales.iter_mut() {
            *l = rng.random_range((0.05f64).ln()..(2.0f64).ln());
        }
    }

    fn diag(&self, x: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_element(x.nrows(), self.amplitude())
    }

    fn cross_vjp(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>, g: &DMatrix<f64>) -> CrossGrad {
        let d = self.input_dim();
        let rel = self.relevances();
        let ra = RowMajor::from_matrix(xa);
        let rb = RowMajor::from_matrix(xb);
        let mut gp = vec![0.0; 1 + d];
        let mut ga = RowMajor::zeros(xa.nrows(), d);
        let mut gb = RowMajor::zeros(xb.nrows(), d);
        for i in 0..xa.nrows() {
            for j in 0..xb.nrows() {
                let w = g[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let k = self.eval(ra.row(i), rb.row(j));
                let wk = w * k;
                gp[0] += wk;
                for t in 0..d {
                    let diff = ra.row(i)[t] - rb.row(j)[t];
                    gp[1 + t] += wk * 2.0 * diff * diff * rel[t];
                    let gx = -2.0 * wk * diff * rel[t];
                    ga.row_mut(i)[t] += gx;
                    gb.row_mut(j)[t] -= gx;
                }
            }
        }
        CrossGrad {
            params: gp,
            xa: ga.to_matrix(),
            xb: gb.to_matrix(),
        }
    }

    fn diag_vjp(&self, x: &DMatrix<f64>, g: &DVector<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let mut gp = vec![0.0; self.n_params()];
        gp[0] = self.amplitude() * g.sum();
        (gp, DMatrix::zeros(x.nrows(), x.ncols()))
    }
}
