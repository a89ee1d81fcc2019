//! Single-unit neural kernel.
//!
//! Each base kernel slot sees both inputs through the same affine warp
//! `u = W x + b`. The slot values are combined with nonnegative weights and
//! passed through an exponential:
//!
//! ```text
//! k(x1, x2) = exp( Σ_i c_i h_i(W_i x1 + b_i, W_i x2 + b_i) + b_z + b_k )
//! ```
//!
//! with `c_i = softplus(·)` and `b_z = softplus(·)`. The exponent is a conic
//! combination of PSD kernels plus a constant, and the exponential of such a
//! kernel is PSD, so every Gram matrix built from it is PSD.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{CrossGrad, Kernel, RowMajor, LOG_LENGTHSCALE_BOUNDS};
use crate::stats::{sigmoid, softplus, softplus_inv};

/// Exponent ceiling applied during Gram assembly.
pub const EXPONENT_CLAMP: f64 = 30.0;
/// Exponent above which [`NeuralKernel::evaluate`] reports an overflow.
pub const EXPONENT_OVERFLOW: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseKind {
    Linear,
    Rbf,
    Rq,
}

impl BaseKind {
    fn n_hyper(self) -> usize {
        match self {
            BaseKind::Linear => 1,
            BaseKind::Rbf => 2,
            BaseKind::Rq => 3,
        }
    }
}

/// One affine-warped base kernel.
///
/// Hyperparameters are stored as logs: `Linear` uses `[ln variance]`, `Rbf`
/// uses `[ln amplitude, ln lengthscale]` and `Rq` adds `ln shape`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseKernelSlot {
    pub kind: BaseKind,
    pub d_in: usize,
    pub d_latent: usize,
    /// Row-major `d_latent × d_in` warp matrix.
    pub warp_weight: Vec<f64>,
    pub warp_bias: Vec<f64>,
    pub log_hyper: Vec<f64>,
}

impl BaseKernelSlot {
    pub fn identity(kind: BaseKind, d_in: usize, d_latent: usize) -> Self {
        let mut w = vec![0.0; d_latent * d_in];
        for i in 0..d_latent.min(d_in) {
            w[i * d_in + i] = 1.0;
        }
        let log_hyper = match kind {
            BaseKind::Linear => vec![(0.5 / d_latent as f64).ln()],
            BaseKind::Rbf => vec![0.0, 0.5f64.ln()],
            BaseKind::Rq => vec![0.0, 0.5f64.ln(), 0.0],
        };
        Self {
            kind,
            d_in,
            d_latent,
            warp_weight: w,
            warp_bias: vec![0.0; d_latent],
            log_hyper,
        }
    }

    fn n_params(&self) -> usize {
        self.d_latent * self.d_in + self.d_latent + self.kind.n_hyper()
    }

    pub fn warp(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.warp_weight[i * self.d_in..(i + 1) * self.d_in];
            *o = self.warp_bias[i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    fn warp_all(&self, x: &RowMajor, n: usize) -> RowMajor {
        let mut u = RowMajor::zeros(n, self.d_latent);
        for i in 0..n {
            self.warp(x.row(i), u.row_mut(i));
        }
        u
    }

    /// Base kernel value on already-warped inputs.
    pub fn value(&self, u: &[f64], v: &[f64]) -> f64 {
        SlotConsts::of(self).eval(u, v).0
    }

    fn bounds(&self, out: &mut Vec<(f64, f64)>) {
        let free = (-1e3, 1e3);
        out.extend(std::iter::repeat_n(free, self.d_latent * self.d_in + self.d_latent));
        let amp = ((1e-4f64).ln(), (1e2f64).ln());
        match self.kind {
            BaseKind::Linear => out.push(amp),
            BaseKind::Rbf => {
                out.push(amp);
                out.push(LOG_LENGTHSCALE_BOUNDS);
            }
            BaseKind::Rq => {
                out.push(amp);
                out.push(LOG_LENGTHSCALE_BOUNDS);
                out.push(((1e-2f64).ln(), (1e2f64).ln()));
            }
        }
    }
}

#[inline]
fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Counts exponent clamping during Gram assembly.
#[derive(Debug, Default)]
struct ClampCounter {
    evaluations: AtomicU64,
    clamped: AtomicU64,
}

/// Single-unit neural kernel; see the module docs for the functional form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NeuralKernel {
    slots: Vec<BaseKernelSlot>,
    combiner_raw: Vec<f64>,
    combiner_bias_raw: f64,
    output_bias: f64,
    #[serde(skip)]
    counter: Arc<ClampCounter>,
    #[serde(skip)]
    signed_combiner: Option<Vec<f64>>,
}

impl PartialEq for NeuralKernel {
    fn eq(&self, other: &Self) -> bool {
        self.slots == other.slots
            && self.combiner_raw == other.combiner_raw
            && self.combiner_bias_raw == other.combiner_bias_raw
            && self.output_bias == other.output_bias
    }
}

impl NeuralKernel {
    /// Default roster (linear, RBF, RQ) with near-identity warps.
    ///
    /// Warp weights get N(0, 0.01²) perturbations, lengthscales start at 0.5,
    /// effective combiner weights at `1/N_k` and the output bias at zero.
    /// Deterministic in `seed`.
    pub fn initialize(d_in: usize, d_latent: usize, seed: u64) -> Self {
        assert!(d_in >= 1 && d_latent >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds = [BaseKind::Linear, BaseKind::Rbf, BaseKind::Rq];
        let noise = Normal::new(0.0, 0.01).unwrap();
        let slots = kinds
            .iter()
            .map(|&k| {
                let mut s = BaseKernelSlot::identity(k, d_in, d_latent);
                for w in s.warp_weight.iter_mut() {
                    *w += noise.sample(&mut rng);
                }
                s
            })
            .collect::<Vec<_>>();
        let n_k = slots.len() as f64;
        Self::from_slots(slots, vec![1.0 / n_k; kinds.len()], 0.0067, 0.0)
    }

    /// Builds a kernel from explicit slots and effective (post-softplus)
    /// combiner weights and bias.
    pub fn from_slots(
        slots: Vec<BaseKernelSlot>,
        combiner_weights: Vec<f64>,
        combiner_bias: f64,
        output_bias: f64,
    ) -> Self {
        assert_eq!(slots.len(), combiner_weights.len());
        assert!(!slots.is_empty());
        let d_in = slots[0].d_in;
        assert!(slots.iter().all(|s| s.d_in == d_in));
        let raw_bias = if combiner_bias > 0.0 {
            softplus_inv(combiner_bias)
        } else {
            -40.0
        };
        Self {
            slots,
            combiner_raw: combiner_weights.iter().map(|&w| softplus_inv(w)).collect(),
            combiner_bias_raw: raw_bias,
            output_bias,
            counter: Arc::default(),
            signed_combiner: None,
        }
    }

    pub fn slots(&self) -> &[BaseKernelSlot] {
        &self.slots
    }

    /// Post-transform combiner weights.
    pub fn combiner_weights(&self) -> Vec<f64> {
        match &self.signed_combiner {
            Some(w) => w.clone(),
            None => self.combiner_raw.iter().map(|&r| softplus(r)).collect(),
        }
    }

    pub fn combiner_bias(&self) -> f64 {
        softplus(self.combiner_bias_raw)
    }

    pub fn output_bias(&self) -> f64 {
        self.output_bias
    }

    /// Test hook: replaces the effective combiner weights without the
    /// nonnegativity transform.
    #[doc(hidden)]
    pub fn with_signed_combiner(mut self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.slots.len());
        self.signed_combiner = Some(weights);
        self
    }

    /// Fraction of Gram entries whose exponent hit the clamp since creation.
    pub fn clamp_fraction(&self) -> f64 {
        let n = self.counter.evaluations.load(Ordering::Relaxed);
        if n == 0 {
            0.0
        } else {
            self.counter.clamped.load(Ordering::Relaxed) as f64 / n as f64
        }
    }

    /// True when more than 1% of evaluations were clamped.
    pub fn is_mis_scaled(&self) -> bool {
        self.clamp_fraction() > 0.01
    }

    fn exponent_from_slots(&self, h: &[f64]) -> f64 {
        let w = self.combiner_weights();
        h.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + self.combiner_bias() + self.output_bias
    }

    /// Exponent of the kernel before the exponential.
    pub fn exponent(&self, x1: &[f64], x2: &[f64]) -> f64 {
        let mut h = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            let mut u = vec![0.0; s.d_latent];
            let mut v = vec![0.0; s.d_latent];
            s.warp(x1, &mut u);
            s.warp(x2, &mut v);
            h.push(s.value(&u, &v));
        }
        self.exponent_from_slots(&h)
    }

    /// Checked evaluation: errors if the exponent exceeds the overflow limit.
    pub fn evaluate(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        if x1.len() != self.input_dim() || x2.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "neural kernel expects dimension {}, got {} and {}",
                self.input_dim(),
                x1.len(),
                x2.len()
            )));
        }
        let e = self.exponent(x1, x2);
        if e > EXPONENT_OVERFLOW {
            return Err(Error::Overflow { exponent: e });
        }
        Ok(e.exp())
    }

    fn clamp_exp(&self, e: f64) -> (f64, bool) {
        self.counter.evaluations.fetch_add(1, Ordering::Relaxed);
        if e > EXPONENT_CLAMP {
            self.counter.clamped.fetch_add(1, Ordering::Relaxed);
            (EXPONENT_CLAMP.exp(), true)
        } else {
            (e.exp(), false)
        }
    }

    fn warped(&self, x: &DMatrix<f64>) -> Vec<RowMajor> {
        let r = RowMajor::from_matrix(x);
        self.slots.iter().map(|s| s.warp_all(&r, x.nrows())).collect()
    }

    /// Shared pair loop for the cross and Gram vector-Jacobian products.
    /// `pairs` yields `(i, j, weight)` with `i` indexing `ua` and `j` `ub`.
    fn pair_vjp<I>(&self, ua: &[RowMajor], ub: &[RowMajor], na: usize, nb: usize, pairs: I) -> PairGrad
    where
        I: Iterator<Item = (usize, usize, f64)>,
    {
        let ns = self.slots.len();
        let w = self.combiner_weights();
        let bz = self.combiner_bias();
        let mut gslot_hyper: Vec<Vec<f64>> = self.slots.iter().map(|s| vec![0.0; s.kind.n_hyper()]).collect();
        let mut gua: Vec<RowMajor> = self.slots.iter().map(|s| RowMajor::zeros(na, s.d_latent)).collect();
        let mut gub: Vec<RowMajor> = self.slots.iter().map(|s| RowMajor::zeros(nb, s.d_latent)).collect();
        let mut gw = vec![0.0; ns];
        let mut gbz = 0.0;
        let mut gbk = 0.0;
        let consts = slot_consts(&self.slots);
        let mut h = vec![0.0; ns];
        let mut r2s = vec![0.0; ns];
        let mut lbs = vec![0.0; ns];
        for (i, j, g) in pairs {
            if g == 0.0 {
                continue;
            }
            let mut e = bz + self.output_bias;
            for (s, c) in consts.iter().enumerate() {
                let (val, r2, lb) = c.eval(ua[s].row(i), ub[s].row(j));
                h[s] = val;
                r2s[s] = r2;
                lbs[s] = lb;
                e += w[s] * val;
            }
            if e > EXPONENT_CLAMP {
                continue;
            }
            let hk = g * e.exp();
            gbk += hk;
            gbz += hk;
            for (s, slot) in self.slots.iter().enumerate() {
                gw[s] += hk * h[s];
                let q = hk * w[s];
                let (u, v) = (ua[s].row(i), ub[s].row(j));
                let gh = &mut gslot_hyper[s];
                match slot.kind {
                    BaseKind::Linear => {
                        let var = consts[s].amp;
                        gh[0] += q * h[s];
                        let c = q * var;
                        let gu = gua[s].row_mut(i);
                        for t in 0..u.len() {
                            gu[t] += c * v[t];
                        }
                        let gv = gub[s].row_mut(j);
                        for t in 0..u.len() {
                            gv[t] += c * u[t];
                        }
                    }
                    BaseKind::Rbf => {
                        let l2 = consts[s].l2;
                        gh[0] += q * h[s];
                        gh[1] += q * h[s] * r2s[s] / l2;
                        let dr2 = -q * h[s] / (2.0 * l2);
                        accumulate_dist_grad(&mut gua[s], &mut gub[s], i, j, u, v, dr2);
                    }
                    BaseKind::Rq => {
                        let l2 = consts[s].l2;
                        let alpha = consts[s].alpha;
                        let base = 1.0 + r2s[s] / (2.0 * alpha * l2);
                        gh[0] += q * h[s];
                        gh[1] += q * h[s] * r2s[s] / (l2 * base);
                        gh[2] += q * h[s] * alpha * (-lbs[s] + (base - 1.0) / base);
                        let dr2 = -q * h[s] / (2.0 * l2 * base);
                        accumulate_dist_grad(&mut gua[s], &mut gub[s], i, j, u, v, dr2);
                    }
                }
            }
        }
        PairGrad {
            gslot_hyper,
            gua,
            gub,
            gw,
            gbz,
            gbk,
        }
    }

    /// Converts warped-space gradients into the flat parameter gradient and
    /// input gradients.
    fn assemble_grad(
        &self,
        pg: PairGrad,
        xa: &DMatrix<f64>,
        xb: Option<&DMatrix<f64>>,
    ) -> (Vec<f64>, DMatrix<f64>, Option<DMatrix<f64>>) {
        let ra = RowMajor::from_matrix(xa);
        let rb = xb.map(RowMajor::from_matrix);
        let na = xa.nrows();
        let d_in = self.input_dim();
        let mut grad = Vec::with_capacity(self.n_params());
        let mut gxa = DMatrix::zeros(na, d_in);
        let mut gxb = xb.map(|m| DMatrix::zeros(m.nrows(), d_in));
        for (s, slot) in self.slots.iter().enumerate() {
            let dl = slot.d_latent;
            let mut gw = vec![0.0; dl * d_in];
            let mut gb = vec![0.0; dl];
            let mut add_side = |gu: &RowMajor, x: &RowMajor, n: usize, gx: &mut DMatrix<f64>| {
                for i in 0..n {
                    let gur = gu.row(i);
                    let xr = x.row(i);
                    for a in 0..dl {
                        let ga = gur[a];
                        if ga == 0.0 {
                            continue;
                        }
                        gb[a] += ga;
                        let wrow = &slot.warp_weight[a * d_in..(a + 1) * d_in];
                        for t in 0..d_in {
                            gw[a * d_in + t] += ga * xr[t];
                            gx[(i, t)] += ga * wrow[t];
                        }
                    }
                }
            };
            add_side(&pg.gua[s], &ra, na, &mut gxa);
            match (&rb, gxb.as_mut()) {
                (Some(rb), Some(gxb)) => add_side(&pg.gub[s], rb, rb.nrows(), gxb),
                _ => add_side(&pg.gub[s], &ra, na, &mut gxa),
            }
            grad.extend_from_slice(&gw);
            grad.extend_from_slice(&gb);
            grad.extend_from_slice(&pg.gslot_hyper[s]);
        }
        for (s, r) in self.combiner_raw.iter().enumerate() {
            grad.push(pg.gw[s] * sigmoid(*r));
        }
        grad.push(pg.gbz * sigmoid(self.combiner_bias_raw));
        grad.push(pg.gbk);
        (grad, gxa, gxb)
    }
}

struct PairGrad {
    gslot_hyper: Vec<Vec<f64>>,
    gua: Vec<RowMajor>,
    gub: Vec<RowMajor>,
    gw: Vec<f64>,
    gbz: f64,
    gbk: f64,
}

/// Hyperparameters of one slot in natural units, hoisted out of pair loops.
#[derive(Clone, Copy)]
struct SlotConsts {
    kind: BaseKind,
    amp: f64,
    l2: f64,
    alpha: f64,
}

impl SlotConsts {
    fn of(slot: &BaseKernelSlot) -> Self {
        let h = &slot.log_hyper;
        match slot.kind {
            BaseKind::Linear => Self {
                kind: slot.kind,
                amp: h[0].exp(),
                l2: 1.0,
                alpha: 1.0,
            },
            BaseKind::Rbf => Self {
                kind: slot.kind,
                amp: h[0].exp(),
                l2: (2.0 * h[1]).exp(),
                alpha: 1.0,
            },
            BaseKind::Rq => Self {
                kind: slot.kind,
                amp: h[0].exp(),
                l2: (2.0 * h[1]).exp(),
                alpha: h[2].exp(),
            },
        }
    }

    /// Value, squared distance and, for RQ, `ln(1 + r²/(2αℓ²))`.
    #[inline]
    fn eval(&self, u: &[f64], v: &[f64]) -> (f64, f64, f64) {
        match self.kind {
            BaseKind::Linear => (self.amp * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>(), 0.0, 0.0),
            BaseKind::Rbf => {
                let r2 = sq_dist(u, v);
                (self.amp * (-0.5 * r2 / self.l2).exp(), r2, 0.0)
            }
            BaseKind::Rq => {
                let r2 = sq_dist(u, v);
                let lb = (r2 / (2.0 * self.alpha * self.l2)).ln_1p();
                (self.amp * (-self.alpha * lb).exp(), r2, lb)
            }
        }
    }
}

fn slot_consts(slots: &[BaseKernelSlot]) -> Vec<SlotConsts> {
    slots.iter().map(SlotConsts::of).collect()
}

#[inline]
fn accumulate_dist_grad(
    gua: &mut RowMajor,
    gub: &mut RowMajor,
    i: usize,
    j: usize,
    u: &[f64],
    v: &[f64],
    dr2: f64,
) {
    let gu = gua.row_mut(i);
    for t in 0..u.len() {
        gu[t] += 2.0 * dr2 * (u[t] - v[t]);
    }
    let gv = gub.row_mut(j);
    for t in 0..u.len() {
        gv[t] -= 2.0 * dr2 * (u[t] - v[t]);
    }
}

impl Kernel for NeuralKernel {
    fn input_dim(&self) -> usize {
        self.slots[0].d_in
    }

    fn n_params(&self) -> usize {
        self.slots.iter().map(|s| s.n_params()).sum::<usize>() + self.slots.len() + 2
    }

    /// Layout: per slot `[warp weight (row-major), warp bias, log hypers]`,
    /// then raw combiner weights, raw combiner bias, output bias.
    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for s in &self.slots {
            p.extend_from_slice(&s.warp_weight);
            p.extend_from_slice(&s.warp_bias);
            p.extend_from_slice(&s.log_hyper);
        }
        p.extend_from_slice(&self.combiner_raw);
        p.push(self.combiner_bias_raw);
        p.push(self.output_bias);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params());
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &params[at..at + n];
            at += n;
            s
        };
        for s in self.slots.iter_mut() {
            let nw = s.warp_weight.len();
            s.warp_weight.copy_from_slice(take(nw));
            let nb = s.warp_bias.len();
            s.warp_bias.copy_from_slice(take(nb));
            let nh = s.log_hyper.len();
            s.log_hyper.copy_from_slice(take(nh));
        }
        let nc = self.combiner_raw.len();
        self.combiner_raw.copy_from_slice(take(nc));
        self.combiner_bias_raw = take(1)[0];
        self.output_bias = take(1)[0];
    }

    fn param_bounds(&self) -> Vec<(f64, f64)> {
        let mut b = Vec::with_capacity(self.n_params());
        for s in &self.slots {
            s.bounds(&mut b);
        }
        b.extend(std::iter::repeat_n((-20.0, 20.0), self.slots.len()));
        b.push((-40.0, 20.0));
        b.push((-20.0, 20.0));
        b
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.clamp_exp(self.exponent(a, b)).0
    }

    fn randomize<R: Rng>(&mut self, rng: &mut R) {
        let d_in = self.input_dim();
        let noise = Normal::new(0.0, 0.05).unwrap();
        for s in self.slots.iter_mut() {
            let mut fresh = BaseKernelSlot::identity(s.kind, d_in, s.d_latent);
            for w in fresh.warp_weight.iter_mut() {
                *w += noise.sample(rng);
            }
            if s.kind != BaseKind::Linear {
                fresh.log_hyper[1] = rng.random_range((0.1f64).ln()..(1.0f64).ln());
            }
            *s = fresh;
        }
        let n_k = self.slots.len() as f64;
        for r in self.combiner_raw.iter_mut() {
            *r = softplus_inv(rng.random_range(0.5..1.5) / n_k);
        }
        self.combiner_bias_raw = softplus_inv(0.0067);
        self.output_bias = 0.0;
    }

    fn cross(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>) -> DMatrix<f64> {
        let ua = self.warped(xa);
        let ub = self.warped(xb);
        let w = self.combiner_weights();
        let c = self.combiner_bias() + self.output_bias;
        let consts = slot_consts(&self.slots);
        DMatrix::from_fn(xa.nrows(), xb.nrows(), |i, j| {
            let mut e = c;
            for (s, k) in consts.iter().enumerate() {
                e += w[s] * k.eval(ua[s].row(i), ub[s].row(j)).0;
            }
            self.clamp_exp(e).0
        })
    }

    fn gram(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let u = self.warped(x);
        let w = self.combiner_weights();
        let c = self.combiner_bias() + self.output_bias;
        let n = x.nrows();
        let consts = slot_consts(&self.slots);
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut e = c;
                for (s, sc) in consts.iter().enumerate() {
                    e += w[s] * sc.eval(u[s].row(i), u[s].row(j)).0;
                }
                let v = self.clamp_exp(e).0;
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn diag(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let u = self.warped(x);
        let w = self.combiner_weights();
        let c = self.combiner_bias() + self.output_bias;
        let consts = slot_consts(&self.slots);
        DVector::from_fn(x.nrows(), |i, _| {
            let mut e = c;
            for (s, k) in consts.iter().enumerate() {
                e += w[s] * k.eval(u[s].row(i), u[s].row(i)).0;
            }
            self.clamp_exp(e).0
        })
    }

    fn cross_vjp(&self, xa: &DMatrix<f64>, xb: &DMatrix<f64>, g: &DMatrix<f64>) -> CrossGrad {
        let ua = self.warped(xa);
        let ub = self.warped(xb);
        let (na, nb) = (xa.nrows(), xb.nrows());
        let pairs = (0..na).flat_map(|i| (0..nb).map(move |j| (i, j, g[(i, j)])));
        let pg = self.pair_vjp(&ua, &ub, na, nb, pairs);
        let (params, gxa, gxb) = self.assemble_grad(pg, xa, Some(xb));
        CrossGrad {
            params,
            xa: gxa,
            xb: gxb.expect("second input gradient"),
        }
    }

    fn gram_vjp(&self, x: &DMatrix<f64>, g: &DMatrix<f64>) -> Vec<f64> {
        let u = self.warped(x);
        let n = x.nrows();
        let pairs = (0..n).flat_map(|i| {
            (i..n).map(move |j| {
                let w = if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] };
                (i, j, w)
            })
        });
        let pg = self.pair_vjp(&u, &u, n, n, pairs);
        self.assemble_grad(pg, x, None).0
    }

    fn diag_vjp(&self, x: &DMatrix<f64>, g: &DVector<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let u = self.warped(x);
        let n = x.nrows();
        let pairs = (0..n).map(|i| (i, i, g[i]));
        let pg = self.pair_vjp(&u, &u, n, n, pairs);
        let (p, gx, _) = self.assemble_grad(pg, x, None);
        (p, gx)
    }
}

/// Smallest eigenvalue of the Gram matrix of `x`; a diagnostic for PSD checks.
pub fn gram_min_eigenvalue(kernel: &NeuralKernel, x: &DMatrix<f64>) -> f64 {
    crate::linalg::min_eigenvalue(&kernel.gram(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rbf_only() -> NeuralKernel {
        let mut s = BaseKernelSlot::identity(BaseKind::Rbf, 1, 1);
        s.log_hyper = vec![0.0, 0.0];
        NeuralKernel::from_slots(vec![s], vec![1.0], 0.0, 0.0)
    }

    #[test]
    fn single_rbf_slot_at_coincident_points_is_e() {
        let k = rbf_only();
        let v = k.evaluate(&[0.3], &[0.3]).unwrap();
        assert!((v - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn single_rbf_slot_decays_to_one() {
        let k = rbf_only();
        let v = k.evaluate(&[0.0], &[1e4]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overflow_is_reported() {
        let mut s = BaseKernelSlot::identity(BaseKind::Linear, 1, 1);
        s.log_hyper = vec![0.0];
        let k = NeuralKernel::from_slots(vec![s], vec![1.0], 0.0, 0.0);
        assert!(matches!(k.evaluate(&[30.0], &[30.0]), Err(Error::Overflow { .. })));
        assert!(k.evaluate(&[1.0], &[1.0]).is_ok());
    }

    #[test]
    fn clamp_counter_flags_mis_scaling() {
        let mut s = BaseKernelSlot::identity(BaseKind::Linear, 1, 1);
        s.log_hyper = vec![0.0];
        let k = NeuralKernel::from_slots(vec![s], vec![1.0], 0.0, 0.0);
        let x = DMatrix::from_row_slice(3, 1, &[10.0, 0.0, 0.1]);
        let _ = k.gram(&x);
        assert!(k.clamp_fraction() > 0.0);
        assert!(k.is_mis_scaled());
    }

    #[test]
    fn negative_combiner_breaks_psd() {
        let mut s = BaseKernelSlot::identity(BaseKind::Rbf, 1, 1);
        s.log_hyper = vec![0.0, (0.5f64).ln()];
        let k = NeuralKernel::from_slots(vec![s], vec![1.0], 0.0, 0.0).with_signed_combiner(vec![-5.0]);
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 0.3]);
        let g = k.gram(&x);
        // off-diagonal exceeds the diagonal, so the 2x2 determinant is negative
        assert!(g[(0, 1)] > g[(0, 0)]);
        assert!(gram_min_eigenvalue(&k, &x) < 0.0);
    }

    #[test]
    fn flatten_roundtrip_is_exact() {
        let k = NeuralKernel::initialize(3, 4, 5);
        let p = k.params();
        let mut k2 = NeuralKernel::initialize(3, 4, 99);
        k2.set_params(&p);
        assert_eq!(k2.params(), p);
        assert_eq!(k2, k);
        assert_eq!(p.len(), k.n_params());
        assert_eq!(k.param_bounds().len(), p.len());
    }
}
