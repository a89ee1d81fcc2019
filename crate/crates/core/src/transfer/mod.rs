//! Encoder/decoder transfer around source GPs trained on another problem.
//!
//! A target point `x` is mapped by the encoder into the source input space,
//! pushed through one GP per source metric, and the resulting Gaussian is
//! propagated through the decoder by a first-order Taylor expansion:
//! mean `D(μ)`, covariance `J diag(v) Jᵀ` with `J = ∂D/∂y` at `μ`.
//!
//! Source GPs work in their own standardized units; the decoder maps those to
//! standardized target units, refreshed from the target data on every fit.

pub mod net;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{FitConfig, GaussianPosterior, GpModel, Standardizer, NOISE_FLOOR};
use crate::kernel::Kernel;
use crate::neuk::NeuralKernel;
use crate::optim::{project, Adam};

pub use net::{Activation, ForwardCache, ShallowNet, DEFAULT_HIDDEN};

/// Initial target noise variance in standardized units.
pub const INITIAL_TARGET_NOISE: f64 = 1e-2;
/// Initial source-GP noise before fitting.
pub const INITIAL_SOURCE_NOISE: f64 = 1e-2;
/// Sigmoid input scale of the near-identity encoder (inputs in [0, 1]).
pub const ENCODER_EPS: f64 = 0.5;
/// Sigmoid input scale of the near-identity decoder (standardized values).
pub const DECODER_EPS: f64 = 0.1;
/// Standard deviation of the weight perturbation at initialization.
pub const INIT_NOISE: f64 = 0.01;

const NET_BOUND: f64 = 1e3;
const LOG_NOISE_MAX: f64 = 2.302_585_092_994_046; // ln 10

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KatTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Whether the source kernels' hyperparameters are trained as well.
    pub train_source_kernel: bool,
}

impl Default for KatTrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-3,
            train_source_kernel: true,
        }
    }
}

/// Joint predictive distribution over the target metrics at each query,
/// in standardized target units.
#[derive(Clone, Debug)]
pub struct KatPrediction {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KatGpModel {
    sources: Vec<GpModel<NeuralKernel>>,
    encoder: ShallowNet,
    decoder: ShallowNet,
    log_noise: f64,
    target_standardizers: Vec<Standardizer>,
    degraded: bool,
}

impl KatGpModel {
    /// Near-identity encoder and decoder around the given source GPs, one per
    /// source metric, all trained on the same inputs. The decoder starts as
    /// the identity in metric units: target metric `k` reads source metric `k`.
    pub fn new(
        sources: Vec<GpModel<NeuralKernel>>,
        target_dim: usize,
        target_metrics: usize,
        seed: u64,
    ) -> Result<Self> {
        let (d_s, m_s) = check_sources(&sources)?;
        if target_dim == 0 || target_metrics == 0 {
            return Err(Error::Dimension("target needs at least one input and one metric".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = DEFAULT_HIDDEN.max(target_dim.min(d_s)).max(m_s.min(target_metrics));
        let encoder = ShallowNet::near_identity(target_dim, d_s, hidden, 0.5, ENCODER_EPS, INIT_NOISE, &mut rng);
        let decoder = ShallowNet::near_identity(m_s, target_metrics, hidden, 0.0, DECODER_EPS, INIT_NOISE, &mut rng);
        let mut model = Self::from_parts(sources, encoder, decoder, INITIAL_TARGET_NOISE)?;
        for k in 0..m_s.min(target_metrics) {
            model.target_standardizers[k] = model.sources[k].standardizer();
        }
        Ok(model)
    }

    /// Assembles a model from explicit networks; dimensions are validated here.
    pub fn from_parts(
        sources: Vec<GpModel<NeuralKernel>>,
        encoder: ShallowNet,
        decoder: ShallowNet,
        target_noise: f64,
    ) -> Result<Self> {
        let (d_s, m_s) = check_sources(&sources)?;
        if encoder.d_out != d_s {
            return Err(Error::Dimension(format!(
                "encoder outputs {} dims, source GP expects {d_s}",
                encoder.d_out
            )));
        }
        if decoder.d_in != m_s {
            return Err(Error::Dimension(format!(
                "decoder takes {} inputs, there are {m_s} source metrics",
                decoder.d_in
            )));
        }
        Ok(Self {
            target_standardizers: vec![Standardizer::IDENTITY; decoder.d_out],
            sources,
            encoder,
            decoder,
            log_noise: target_noise.max(NOISE_FLOOR).ln(),
            degraded: false,
        })
    }

    pub fn sources(&self) -> &[GpModel<NeuralKernel>] {
        &self.sources
    }

    pub fn encoder(&self) -> &ShallowNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &ShallowNet {
        &self.decoder
    }

    pub fn target_dim(&self) -> usize {
        self.encoder.d_in
    }

    pub fn target_metrics(&self) -> usize {
        self.decoder.d_out
    }

    pub fn target_noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn target_standardizers(&self) -> &[Standardizer] {
        &self.target_standardizers
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    /// Trainable parameters: encoder, decoder, each source kernel, log σ²_t.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        for s in &self.sources {
            p.extend(s.kernel().params());
        }
        p.push(self.log_noise);
        p
    }

    pub fn param_bounds(&self) -> Vec<(f64, f64)> {
        let n_net = self.encoder.n_params() + self.decoder.n_params();
        let mut b = vec![(-NET_BOUND, NET_BOUND); n_net];
        for s in &self.sources {
            b.extend(s.kernel().param_bounds());
        }
        b.push((NOISE_FLOOR.ln(), LOG_NOISE_MAX));
        b
    }

    /// Copy with new parameters; source GPs are refactorized against their
    /// unchanged data when their kernel parameters differ.
    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.params().len() {
            return Err(Error::Dimension(format!(
                "{} parameters given, model has {}",
                p.len(),
                self.params().len()
            )));
        }
        let mut m = self.clone();
        let ne = m.encoder.n_params();
        let nd = m.decoder.n_params();
        m.encoder.set_params(&p[..ne]);
        m.decoder.set_params(&p[ne..ne + nd]);
        let mut off = ne + nd;
        for s in m.sources.iter_mut() {
            let k = s.kernel().n_params();
            let kp = &p[off..off + k];
            if kp != s.kernel().params().as_slice() {
                let mut sp = kp.to_vec();
                sp.push(s.noise().ln());
                *s = s.with_params(&sp)?;
            }
            off += k;
        }
        m.log_noise = p[off];
        Ok(m)
    }

    fn encode(&self, x: &DMatrix<f64>) -> Result<(Vec<ForwardCache>, DMatrix<f64>)> {
        if x.ncols() != self.target_dim() {
            return Err(Error::Dimension(format!(
                "target points have {} columns, encoder expects {}",
                x.ncols(),
                self.target_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite target point".into()));
        }
        let caches: Vec<ForwardCache> = (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.encoder.forward_cached(&row)
            })
            .collect();
        let d_s = self.encoder.d_out;
        let e = DMatrix::from_fn(x.nrows(), d_s, |i, j| caches[i].output[j]);
        Ok((caches, e))
    }

    /// Delta-method prediction in standardized target units.
    pub fn predict_standardized(&self, xq: &DMatrix<f64>) -> Result<KatPrediction> {
        let (_, e) = self.encode(xq)?;
        let posts = self
            .sources
            .iter()
            .map(|s| s.posterior_standardized(&e))
            .collect::<Result<Vec<_>>>()?;
        let m_s = self.sources.len();
        let mut mean = Vec::with_capacity(xq.nrows());
        let mut cov = Vec::with_capacity(xq.nrows());
        for i in 0..xq.nrows() {
            let mu: Vec<f64> = posts.iter().map(|p| p.mean[i]).collect();
            let c = self.decoder.forward_cached(&mu);
            let j = self.decoder.jacobian(&c);
            let v = DVector::from_fn(m_s, |m, _| posts[m].variance[i]);
            let mut s = &j * DMatrix::from_diagonal(&v) * j.transpose();
            for k in 0..s.nrows() {
                s[(k, k)] = s[(k, k)].max(0.0);
            }
            mean.push(DVector::from_vec(c.output));
            cov.push(s);
        }
        Ok(KatPrediction { mean, cov })
    }

    /// Per-target-metric marginal posteriors in target units.
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<Vec<GaussianPosterior>> {
        let p = self.predict_standardized(xq)?;
        let noise = self.target_noise();
        Ok(self
            .target_standardizers
            .iter()
            .enumerate()
            .map(|(k, st)| {
                let s2 = st.scale * st.scale;
                GaussianPosterior {
                    mean: DVector::from_fn(xq.nrows(), |i, _| st.backward(p.mean[i][k])),
                    variance: DVector::from_fn(xq.nrows(), |i, _| p.cov[i][(k, k)] * s2),
                    noise: noise * s2,
                }
            })
            .collect())
    }

    /// Same model with target standardization fitted to `y`. The decoder's
    /// output layer absorbs the change, so predictions in target units are
    /// unaffected.
    fn restandardized(&self, y: &DMatrix<f64>) -> Self {
        let mut out = self.clone();
        for k in 0..y.ncols().min(out.target_standardizers.len()) {
            let old = out.target_standardizers[k];
            let new = Standardizer::fit(y.column(k).as_slice());
            out.decoder
                .rescale_output(k, old.scale / new.scale, (old.mean - new.mean) / new.scale);
            out.target_standardizers[k] = new;
        }
        out
    }

    /// Copy whose decoder outputs are refitted by least squares as
    /// `a·D_k + b` against the standardized targets. Only positive gains are
    /// applied: an output whose fit would flip its sign is left unchanged.
    /// `None` if any output is constant over `x`.
    fn calibrated(&self, x: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<Option<Self>> {
        let p = self.predict_standardized(x)?;
        let n = x.nrows() as f64;
        let mut out = self.clone();
        for k in 0..ys.ncols() {
            let d: Vec<f64> = p.mean.iter().map(|m| m[k]).collect();
            let (dm, ym) = (d.iter().sum::<f64>() / n, ys.column(k).sum() / n);
            let sdd: f64 = d.iter().map(|v| (v - dm).powi(2)).sum();
            let sdy: f64 = d.iter().zip(ys.column(k).iter()).map(|(v, t)| (v - dm) * (t - ym)).sum();
            if sdd < 1e-12 {
                return Ok(None);
            }
            let a = sdy / sdd;
            if a > 0.0 {
                out.decoder.rescale_output(k, a, ym - a * dm);
            }
        }
        Ok(Some(out))
    }

    fn standardize_targets(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.ncols() != self.target_metrics() {
            return Err(Error::Dimension(format!(
                "targets have {} columns, decoder produces {}",
                y.ncols(),
                self.target_metrics()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite target value".into()));
        }
        Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |i, k| {
            self.target_standardizers[k].forward(y[(i, k)])
        }))
    }

    /// Sum of per-point Gaussian log densities of the standardized targets.
    pub fn log_likelihood(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
        let ys = self.standardize_targets(y)?;
        Ok(self.objective(x, &ys, false, false)?.0)
    }

    /// Likelihood and its gradient with respect to [`KatGpModel::params`].
    pub fn log_likelihood_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
        let ys = self.standardize_targets(y)?;
        let (l, g) = self.objective(x, &ys, true, true)?;
        Ok((l, g.expect("gradient requested")))
    }

    fn objective(
        &self,
        x: &DMatrix<f64>,
        ys: &DMatrix<f64>,
        want_grad: bool,
        source_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("empty target dataset".into()));
        }
        if ys.nrows() != n {
            return Err(Error::Dimension(format!("{n} target points but {} target rows", ys.nrows())));
        }
        let (enc_caches, e) = self.encode(x)?;
        let m_s = self.sources.len();
        let m_t = self.target_metrics();

        struct SourceTerms {
            b: DMatrix<f64>,
            mu: DVector<f64>,
            var: DVector<f64>,
            clamped: Vec<bool>,
        }
        let mut terms = Vec::with_capacity(m_s);
        for s in &self.sources {
            let kq = s.kernel().cross(&e, s.x());
            if kq.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite source cross-covariance".into()));
            }
            let mu = &kq * s.alpha();
            let b = s.factor().solve_mat(&kq.transpose());
            let kqq = s.kernel().diag(&e);
            let mut clamped = vec![false; n];
            let var = DVector::from_fn(n, |i, _| {
                let v = kqq[i] - kq.row(i).transpose().dot(&b.column(i));
                if v < 0.0 {
                    clamped[i] = true;
                    0.0
                } else {
                    v
                }
            });
            terms.push(SourceTerms { b, mu, var, clamped });
        }

        let noise = self.log_noise.exp();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let ne = self.encoder.n_params();
        let nd = self.decoder.n_params();
        let mut grad = vec![0.0; if want_grad { self.params().len() } else { 0 }];
        let mut g_mu = DMatrix::zeros(n, m_s);
        let mut g_var = DMatrix::zeros(n, m_s);
        let mut g_noise = 0.0;
        let mut total = 0.0;
        for i in 0..n {
            let mu: Vec<f64> = terms.iter().map(|t| t.mu[i]).collect();
            let v = DVector::from_fn(m_s, |m, _| terms[m].var[i]);
            let c = self.decoder.forward_cached(&mu);
            let j = self.decoder.jacobian(&c);
            let mut s = &j * DMatrix::from_diagonal(&v) * j.transpose();
            for k in 0..m_t {
                s[(k, k)] = s[(k, k)].max(0.0) + noise;
            }
            let r = DVector::from_fn(m_t, |k, _| ys[(i, k)] - c.output[k]);
            let chol = nalgebra::Cholesky::new(s.clone()).ok_or_else(|| Error::Numeric {
                index: i,
                reason: "predictive covariance is not positive definite".into(),
            })?;
            let a = chol.solve(&r);
            let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            let li = -0.5 * r.dot(&a) - 0.5 * log_det - 0.5 * m_t as f64 * ln2pi;
            if !li.is_finite() {
                return Err(Error::Numeric {
                    index: i,
                    reason: "non-finite log density".into(),
                });
            }
            total += li;
            if !want_grad {
                continue;
            }
            let g_s = (&a * a.transpose() - chol.inverse()) * 0.5;
            g_noise += g_s.trace();
            let gsj = &g_s * &j;
            for m in 0..m_s {
                g_var[(i, m)] = j.column(m).dot(&gsj.column(m));
            }
            let g_jac = &gsj * DMatrix::from_diagonal(&v) * 2.0;
            let g_in = self
                .decoder
                .backward(&c, a.as_slice(), Some(&g_jac), &mut grad[ne..ne + nd]);
            for m in 0..m_s {
                g_mu[(i, m)] = g_in[m];
            }
        }
        if !want_grad {
            return Ok((total, None));
        }

        let mut g_e = DMatrix::zeros(n, self.encoder.d_out);
        let mut off = ne + nd;
        for (m, (s, t)) in self.sources.iter().zip(&terms).enumerate() {
            let k = s.kernel().n_params();
            let gm = g_mu.column(m).into_owned();
            let gv = DVector::from_fn(n, |i, _| if t.clamped[i] { 0.0 } else { g_var[(i, m)] });
            // μ = Kq α and v = kqq - diag(Kq A⁻¹ Kqᵀ), with B = A⁻¹ Kqᵀ.
            let mut g_kq = &gm * s.alpha().transpose();
            for i in 0..n {
                for c in 0..g_kq.ncols() {
                    g_kq[(i, c)] -= 2.0 * gv[i] * t.b[(c, i)];
                }
            }
            let cg = s.kernel().cross_vjp(&e, s.x(), &g_kq);
            let (dg_params, dg_x) = s.kernel().diag_vjp(&e, &gv);
            g_e += cg.xa + dg_x;
            if source_grad {
                let beta = &t.b * &gm;
                let bg = DMatrix::from_fn(t.b.nrows(), n, |r, c| t.b[(r, c)] * gv[c]);
                let g_a = &bg * t.b.transpose() - &beta * s.alpha().transpose();
                let gram = s.kernel().gram_vjp(s.x(), &g_a);
                for q in 0..k {
                    grad[off + q] += cg.params[q] + dg_params[q] + gram[q];
                }
            }
            off += k;
        }
        grad[off] = g_noise * noise;

        for (i, cache) in enc_caches.iter().enumerate() {
            let row: Vec<f64> = g_e.row(i).iter().copied().collect();
            self.encoder.backward(cache, &row, None, &mut grad[..ne]);
        }
        Ok((total, Some(grad)))
    }

    /// Maximum-likelihood training of encoder, decoder, source kernels and
    /// target noise on `(x, y)`. Target standardization is refreshed first,
    /// and the decoder outputs are recalibrated by least squares when that
    /// raises the likelihood. The result never has a lower likelihood than
    /// the starting point.
    pub fn train(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &KatTrainConfig) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::InvalidInput("training needs at least two target points".into()));
        }
        if y.nrows() != x.nrows() {
            return Err(Error::Dimension(format!("{} target points but {} target rows", x.nrows(), y.nrows())));
        }
        if y.ncols() != self.target_metrics() {
            return Err(Error::Dimension(format!(
                "targets have {} columns, decoder produces {}",
                y.ncols(),
                self.target_metrics()
            )));
        }
        let mut start = self.restandardized(y);
        start.degraded = false;
        let ys = start.standardize_targets(y)?;
        let (mut l0, _) = start.objective(x, &ys, false, false)?;
        if let Some(c) = start.calibrated(x, &ys)? {
            if let Ok((lc, _)) = c.objective(x, &ys, false, false) {
                if lc > l0 {
                    start = c;
                    l0 = lc;
                }
            }
        }
        let bounds = start.param_bounds();
        let mut p = start.params();
        let mut best = (l0, p.clone());
        let mut adam = Adam::new(p.len(), cfg.learning_rate);
        let mut model = start.clone();
        for step in 0..=cfg.steps {
            if step > 0 {
                match start.with_params(&p) {
                    Ok(m) => model = m,
                    Err(_) => {
                        start.degraded = true;
                        break;
                    }
                }
            }
            let (l, g) = match model.objective(x, &ys, true, cfg.train_source_kernel) {
                Ok((l, Some(g))) if l.is_finite() && g.iter().all(|v| v.is_finite()) => (l, g),
                _ => {
                    start.degraded = true;
                    break;
                }
            };
            if l > best.0 {
                best = (l, p.clone());
            }
            if step == cfg.steps {
                break;
            }
            adam.ascend(&mut p, &g);
            project(&mut p, &bounds);
        }
        let mut out = start.with_params(&best.1)?;
        out.degraded = start.degraded;
        Ok(out)
    }
}

fn check_sources(sources: &[GpModel<NeuralKernel>]) -> Result<(usize, usize)> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Config("transfer needs at least one source GP".into()))?;
    for s in &sources[1..] {
        if s.x() != first.x() {
            return Err(Error::Config("source GPs must share their training inputs".into()));
        }
    }
    Ok((first.x().ncols(), sources.len()))
}

/// One Neuk GP per column of `y`, each fitted by maximum likelihood.
pub fn fit_source_gps(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &FitConfig) -> Result<Vec<GpModel<NeuralKernel>>> {
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension(format!("{} source points but {} rows of metrics", x.nrows(), y.nrows())));
    }
    (0..y.ncols())
        .map(|m| {
            let seed = cfg.seed.wrapping_add(m as u64);
            let kernel = NeuralKernel::initialize(x.ncols(), x.ncols(), seed);
            let gp = GpModel::new(x.clone(), y.column(m).into_owned(), kernel, INITIAL_SOURCE_NOISE)?;
            Ok(gp.fit(&FitConfig { seed, ..*cfg }))
        })
        .collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Source GPs saved once and reused by any number of transfer runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceCheckpoint {
    pub version: u32,
    pub problem: String,
    pub metrics: Vec<String>,
    pub sources: Vec<GpModel<NeuralKernel>>,
}

impl SourceCheckpoint {
    pub fn new(problem: impl Into<String>, metrics: Vec<String>, sources: Vec<GpModel<NeuralKernel>>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            problem: problem.into(),
            metrics,
            sources,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = load_json(path)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        check_sources(&c.sources)?;
        Ok(c)
    }
}

pub(crate) fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(n: usize, d: usize, seed: u64) -> GpModel<NeuralKernel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| rng.random_range(0.0..1.0));
        let y = DVector::from_fn(n, |i, _| (3.0 * x[(i, 0)]).sin() + x.row(i).sum());
        GpModel::new(x, y, NeuralKernel::initialize(d, d, seed), 1e-2).unwrap()
    }

    /// `D(y) = a·y + b` through the identity activation.
    fn linear_decoder(a: f64, b: f64) -> ShallowNet {
        let mut net = ShallowNet::zeros(1, 1, 1, Activation::Identity);
        net.w1[0] = 1.0;
        net.w2[0] = a;
        net.b2[0] = b;
        net
    }

    fn identity_encoder(d: usize) -> ShallowNet {
        let mut net = ShallowNet::zeros(d, d, d, Activation::Identity);
        for i in 0..d {
            net.w1[i * d + i] = 1.0;
            net.w2[i * d + i] = 1.0;
        }
        net
    }

    #[test]
    fn linear_decoder_is_exact() {
        let src = source(8, 2, 1);
        let m = KatGpModel::from_parts(vec![src.clone()], identity_encoder(2), linear_decoder(2.0, 3.0), 1e-2).unwrap();
        let xq = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.5, 0.5, 0.9, 0.3]);
        let p = m.predict_standardized(&xq).unwrap();
        let s = src.posterior_standardized(&xq).unwrap();
        for i in 0..3 {
            assert!((p.mean[i][0] - (2.0 * s.mean[i] + 3.0)).abs() < 1e-12);
            assert!((p.cov[i][(0, 0)] - 4.0 * s.variance[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_likelihood() {
        let src = source(6, 1, 2);
        let m = KatGpModel::from_parts(vec![src.clone()], identity_encoder(1), linear_decoder(1.0, 0.0), 0.05).unwrap();
        let xq = DMatrix::from_element(1, 1, 0.37);
        let s = src.posterior_standardized(&xq).unwrap();
        let y = DMatrix::from_element(1, 1, s.mean[0]);
        let v = s.variance[0] + 0.05;
        let expected = -0.5 * (2.0 * std::f64::consts::PI * v).ln();
        assert!((m.log_likelihood(&xq, &y).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn noise_dominated_limit() {
        let src = source(6, 1, 3);
        let m = KatGpModel::from_parts(vec![src], identity_encoder(1), linear_decoder(1.0, 0.0), 1e8).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[0.2, 0.7]);
        let y = DMatrix::from_row_slice(2, 1, &[5.0, -3.0]);
        let per_point = -0.5 * (2.0 * std::f64::consts::PI * 1e8).ln();
        assert!((m.log_likelihood(&x, &y).unwrap() - 2.0 * per_point).abs() < 1e-6);
    }

    #[test]
    fn mismatched_decoder_rejected_at_construction() {
        let src = source(5, 2, 4);
        let bad = ShallowNet::zeros(2, 4, 1, Activation::Sigmoid);
        assert!(matches!(
            KatGpModel::from_parts(vec![src], identity_encoder(2), bad, 1e-2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn near_identity_start_tracks_source() {
        let src = source(10, 2, 5);
        let m = KatGpModel::new(vec![src.clone()], 2, 1, 7).unwrap();
        let xq = DMatrix::from_row_slice(2, 2, &[0.3, 0.6, 0.8, 0.1]);
        let p = m.predict_standardized(&xq).unwrap();
        let s = src.posterior_standardized(&xq).unwrap();
        for i in 0..2 {
            assert!((p.mean[i][0] - s.mean[i]).abs() < 0.05, "{} vs {}", p.mean[i][0], s.mean[i]);
        }
    }

    #[test]
    fn training_does_not_decrease_likelihood() {
        let src = source(12, 2, 6);
        let m = KatGpModel::new(vec![src.clone()], 2, 1, 8).unwrap();
        let x: DMatrix<f64> = DMatrix::from_row_slice(4, 2, &[0.1, 0.1, 0.4, 0.8, 0.7, 0.3, 0.9, 0.9]);
        let y = DMatrix::from_fn(4, 1, |i, _| 2.0 * ((3.0 * x[(i, 0)]).sin() + x.row(i).sum()));
        let start = m.restandardized(&y);
        let l0 = start.log_likelihood(&x, &y).unwrap();
        let cfg = KatTrainConfig {
            steps: 30,
            ..Default::default()
        };
        let t = m.train(&x, &y, &cfg).unwrap();
        assert!(t.log_likelihood(&x, &y).unwrap() >= l0);
        assert_eq!(t.sources()[0].x(), src.x());
        assert_eq!(t.sources()[0].y(), src.y());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("src.json");
        let c = SourceCheckpoint::new("toy", vec!["f".into()], vec![source(5, 2, 9)]);
        c.save(&path).unwrap();
        let back = SourceCheckpoint::load(&path).unwrap();
        assert_eq!(back.sources[0].x(), c.sources[0].x());
        assert_eq!(back.sources[0].kernel(), c.sources[0].kernel());
    }
}
