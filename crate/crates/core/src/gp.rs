//! Exact Gaussian-process regression.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{assemble_gram, Kernel};
use crate::linalg::JitteredCholesky;
use crate::optim::{project, Adam};

/// Smallest admissible noise variance (standardized units).
pub const NOISE_FLOOR: f64 = 1e-8;
const LOG_NOISE_BOUNDS: (f64, f64) = (-18.420_680_743_952_367, 2.302_585_092_994_046);

/// Affine map between raw targets and zero-mean unit-variance targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub scale: f64,
}

impl Standardizer {
    pub const IDENTITY: Standardizer = Standardizer { mean: 0.0, scale: 1.0 };

    /// Fits mean and standard deviation; a zero spread keeps unit scale.
    pub fn fit(y: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        Self {
            mean,
            scale: if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 },
        }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn backward(&self, z: f64) -> f64 {
        self.mean + self.scale * z
    }
}

/// Predictive mean and latent variance at a set of query points, plus the
/// observation-noise variance in the same units.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub noise: f64,
}

impl GaussianPosterior {
    /// Variance of a new noisy observation at query `i`.
    pub fn observation_variance(&self, i: usize) -> f64 {
        self.variance[i] + self.noise
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Optimizer settings for maximum-likelihood fitting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub restarts: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            restarts: 3,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Cache {
    factor: JitteredCholesky,
    alpha: DVector<f64>,
}

/// Exact GP with a cached Cholesky factor of `K + σ²I`.
///
/// Inputs are expected in unit-cube coordinates. Targets are standardized
/// unless the model was built with [`GpModel::new_unstandardized`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(
    try_from = "GpModelData<K>",
    into = "GpModelData<K>",
    bound = "K: Kernel + Serialize + DeserializeOwned"
)]
pub struct GpModel<K: Kernel> {
    x: DMatrix<f64>,
    y: DVector<f64>,
    y_std: DVector<f64>,
    standardizer: Standardizer,
    standardize: bool,
    kernel: K,
    log_noise: f64,
    degraded: bool,
    cache: Cache,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "K: Serialize + DeserializeOwned")]
pub struct GpModelData<K> {
    x: DMatrix<f64>,
    y: DVector<f64>,
    standardize: bool,
    kernel: K,
    noise: f64,
    degraded: bool,
}

impl<K: Kernel> TryFrom<GpModelData<K>> for GpModel<K> {
    type Error = Error;

    fn try_from(d: GpModelData<K>) -> Result<Self> {
        let mut m = GpModel::build(d.x, d.y, d.kernel, d.noise, d.standardize)?;
        m.degraded = d.degraded;
        Ok(m)
    }
}

impl<K: Kernel> From<GpModel<K>> for GpModelData<K> {
    fn from(m: GpModel<K>) -> Self {
        GpModelData {
            noise: m.noise(),
            x: m.x,
            y: m.y,
            standardize: m.standardize,
            kernel: m.kernel,
            degraded: m.degraded,
        }
    }
}

impl<K: Kernel> GpModel<K> {
    /// Builds a model on standardized targets.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, kernel: K, noise: f64) -> Result<Self> {
        Self::build(x, y, kernel, noise, true)
    }

    /// Builds a model that uses the targets as given.
    pub fn new_unstandardized(x: DMatrix<f64>, y: DVector<f64>, kernel: K, noise: f64) -> Result<Self> {
        Self::build(x, y, kernel, noise, false)
    }

    fn build(x: DMatrix<f64>, y: DVector<f64>, kernel: K, noise: f64, standardize: bool) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("no training points".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!("{} inputs but {} targets", x.nrows(), y.len())));
        }
        if x.ncols() != kernel.input_dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} columns, kernel expects {}",
                x.ncols(),
                kernel.input_dim()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite training target".into()));
        }
        let standardizer = if standardize {
            Standardizer::fit(y.as_slice())
        } else {
            Standardizer::IDENTITY
        };
        let y_std = y.map(|v| standardizer.forward(v));
        let log_noise = noise.max(NOISE_FLOOR).ln();
        let cache = factorize(&kernel, &x, &y_std, log_noise)?;
        Ok(Self {
            x,
            y,
            y_std,
            standardizer,
            standardize,
            kernel,
            log_noise,
            degraded: false,
            cache,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn y_standardized(&self) -> &DVector<f64> {
        &self.y_std
    }

    pub fn kernel(&self) -> &K {
        &self.kernel
    }

    pub fn standardizer(&self) -> Standardizer {
        self.standardizer
    }

    /// Noise variance in standardized units.
    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn jitter(&self) -> f64 {
        self.cache.factor.jitter
    }

    pub fn factor(&self) -> &JitteredCholesky {
        &self.cache.factor
    }

    /// `(K + σ²I)⁻¹ y` on standardized targets.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.cache.alpha
    }

    /// True when the last fit could not improve on its starting point
    /// because every optimizer run diverged.
    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Kernel parameters followed by the log noise variance.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.kernel.params();
        p.push(self.log_noise);
        p
    }

    pub fn param_bounds(&self) -> Vec<(f64, f64)> {
        let mut b = self.kernel.param_bounds();
        b.push(LOG_NOISE_BOUNDS);
        b
    }

    /// Same data, new parameters; refactorizes.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let np = self.kernel.n_params();
        let mut kernel = self.kernel.clone();
        kernel.set_params(&params[..np]);
        let log_noise = params[np].max(NOISE_FLOOR.ln());
        let cache = factorize(&kernel, &self.x, &self.y_std, log_noise)?;
        Ok(Self {
            kernel,
            log_noise,
            cache,
            degraded: false,
            ..self.clone()
        })
    }

    /// Same parameters, new data (standardization refreshed).
    pub fn with_data(&self, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        Self::build(x, y, self.kernel.clone(), self.noise(), self.standardize)
    }

    /// Log marginal likelihood of the (standardized) targets:
    /// `-½ yᵀA⁻¹y - ½ ln|A| - (n/2) ln 2π`, `A = K + σ²I`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.n() as f64;
        -0.5 * self.y_std.dot(&self.cache.alpha)
            - 0.5 * self.cache.factor.log_det()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Likelihood and its gradient with respect to [`GpModel::params`].
    pub fn log_marginal_likelihood_grad(&self) -> (f64, Vec<f64>) {
        let alpha = &self.cache.alpha;
        let ainv = self.cache.factor.inverse();
        let g = (alpha * alpha.transpose() - ainv) * 0.5;
        let mut grad = self.kernel.gram_vjp(&self.x, &g);
        grad.push(self.noise() * g.trace());
        (self.log_marginal_likelihood(), grad)
    }

    /// Predictive posterior in standardized target units.
    pub fn posterior_standardized(&self, xq: &DMatrix<f64>) -> Result<GaussianPosterior> {
        if xq.ncols() != self.x.ncols() {
            return Err(Error::Dimension(format!(
                "query has {} columns, model has {}",
                xq.ncols(),
                self.x.ncols()
            )));
        }
        if xq.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite query".into()));
        }
        let kq = self.kernel.cross(xq, &self.x);
        let mean = &kq * &self.cache.alpha;
        let v = self.cache.factor.solve_lower(&kq.transpose());
        let prior = self.kernel.diag(xq);
        let variance = DVector::from_fn(xq.nrows(), |i, _| {
            let c = v.column(i);
            (prior[i] - c.dot(&c)).max(0.0)
        });
        Ok(GaussianPosterior {
            mean,
            variance,
            noise: self.noise(),
        })
    }

    /// Predictive posterior in original target units: latent variance plus
    /// the observation noise kept separately.
    pub fn posterior(&self, xq: &DMatrix<f64>) -> Result<GaussianPosterior> {
        let p = self.posterior_standardized(xq)?;
        let s = self.standardizer;
        Ok(GaussianPosterior {
            mean: p.mean.map(|m| s.backward(m)),
            variance: p.variance * (s.scale * s.scale),
            noise: p.noise * s.scale * s.scale,
        })
    }

    /// Maximum-likelihood fit with Adam, starting from the current parameters
    /// plus `restarts` randomized starts. The returned model's likelihood is
    /// never below the starting model's.
    pub fn fit(&self, cfg: &FitConfig) -> Self {
        if self.n() < 2 {
            return self.clone();
        }
        let bounds = self.param_bounds();
        let start_lml = self.log_marginal_likelihood();
        let mut best = (start_lml, self.params());
        let mut any_finished = false;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for restart in 0..=cfg.restarts {
            let mut p = if restart == 0 {
                self.params()
            } else {
                let mut k = self.kernel.clone();
                k.randomize(&mut rng);
                let mut p = k.params();
                p.push(1e-2f64.ln());
                p
            };
            project(&mut p, &bounds);
            let mut adam = Adam::new(p.len(), cfg.learning_rate);
            let mut diverged = false;
            for step in 0..=cfg.steps {
                let Ok(m) = self.with_params(&p) else {
                    diverged = true;
                    break;
                };
                let (l, g) = m.log_marginal_likelihood_grad();
                if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    diverged = true;
                    break;
                }
                if l > best.0 {
                    best = (l, p.clone());
                }
                if step == cfg.steps {
                    break;
                }
                adam.ascend(&mut p, &g);
                project(&mut p, &bounds);
            }
            any_finished |= !diverged;
        }
        match self.with_params(&best.1) {
            Ok(mut m) => {
                m.degraded = !any_finished;
                m
            }
            Err(_) => {
                let mut m = self.clone();
                m.degraded = true;
                m
            }
        }
    }
}

fn factorize<K: Kernel>(kernel: &K, x: &DMatrix<f64>, y_std: &DVector<f64>, log_noise: f64) -> Result<Cache> {
    let mut a = assemble_gram(kernel, x)?;
    let noise = log_noise.exp();
    for i in 0..a.nrows() {
        a[(i, i)] += noise;
    }
    let factor = JitteredCholesky::new(&a)?;
    let alpha = factor.solve(y_std);
    Ok(Cache { factor, alpha })
}
