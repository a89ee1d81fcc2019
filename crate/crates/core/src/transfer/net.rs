//! Two-layer `linear → activation → linear` network with analytic
//! input Jacobian and its parameter gradients.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    /// Bypasses the nonlinearity; only meant for tests of the linear path.
    Identity,
}

impl Activation {
    /// Value, first and second derivative.
    #[inline]
    fn eval(self, a: f64) -> (f64, f64, f64) {
        match self {
            Activation::Sigmoid => {
                let s = crate::stats::sigmoid(a);
                let d1 = s * (1.0 - s);
                (s, d1, d1 * (1.0 - 2.0 * s))
            }
            Activation::Identity => (a, 1.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShallowNet {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    /// Row-major `hidden × d_in`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `d_out × hidden`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub act: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub output: Vec<f64>,
}

impl ShallowNet {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize, activation: Activation) -> Self {
        Self {
            d_in,
            hidden,
            d_out,
            w1: vec![0.0; hidden * d_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; d_out * hidden],
            b2: vec![0.0; d_out],
            activation,
        }
    }

    /// Sigmoid network approximating `y_k = x_k` for `k < min(d_in, d_out)`
    /// (zero for the remaining outputs) around `center`, using the linear
    /// regime of the sigmoid: `y = (4/ε)(σ(ε(x - c)) - ½) + c`.
    /// Weights receive perturbations of standard deviation `noise` measured
    /// in output units (first-layer noise is scaled by `ε`), and the output
    /// bias is then corrected so that `center` still maps to itself.
    pub fn near_identity<R: Rng>(
        d_in: usize,
        d_out: usize,
        hidden: usize,
        center: f64,
        eps: f64,
        noise: f64,
        rng: &mut R,
    ) -> Self {
        let k = d_in.min(d_out);
        assert!(hidden >= k, "hidden layer narrower than the identity path");
        let mut net = Self::zeros(d_in, hidden, d_out, Activation::Sigmoid);
        for i in 0..k {
            net.w1[i * d_in + i] = eps;
            net.b1[i] = -eps * center;
            net.w2[i * hidden + i] = 4.0 / eps;
            net.b2[i] = center - 2.0 / eps;
        }
        if noise > 0.0 {
            let n1 = Normal::new(0.0, noise * eps).unwrap();
            let n2 = Normal::new(0.0, noise).unwrap();
            for w in net.w1.iter_mut() {
                *w += n1.sample(rng);
            }
            for w in net.w2.iter_mut() {
                *w += n2.sample(rng);
            }
            let at_center = net.forward(&vec![center; d_in]);
            for (o, y) in at_center.iter().enumerate() {
                let target = if o < k { center } else { 0.0 };
                net.b2[o] += target - y;
            }
        }
        net
    }

    /// Replaces output `o` by `a·y_o + b` through the output layer alone.
    pub fn rescale_output(&mut self, o: usize, a: f64, b: f64) {
        for w in &mut self.w2[o * self.hidden..(o + 1) * self.hidden] {
            *w *= a;
        }
        self.b2[o] = a * self.b2[o] + b;
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
    }

    pub fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        assert_eq!(x.len(), self.d_in);
        let mut act = vec![0.0; self.hidden];
        let mut d1 = vec![0.0; self.hidden];
        let mut d2 = vec![0.0; self.hidden];
        for h in 0..self.hidden {
            let row = &self.w1[h * self.d_in..(h + 1) * self.d_in];
            let a = self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            let (s, s1, s2) = self.activation.eval(a);
            act[h] = s;
            d1[h] = s1;
            d2[h] = s2;
        }
        let output = (0..self.d_out)
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                self.b2[o] + row.iter().zip(&act).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        ForwardCache {
            input: x.to_vec(),
            act,
            d1,
            d2,
            output,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).output
    }

    /// `∂y/∂x = W2 · diag(σ') · W1`, shape `d_out × d_in`.
    pub fn jacobian(&self, cache: &ForwardCache) -> DMatrix<f64> {
        DMatrix::from_fn(self.d_out, self.d_in, |o, i| {
            (0..self.hidden)
                .map(|h| self.w2[o * self.hidden + h] * cache.d1[h] * self.w1[h * self.d_in + i])
                .sum()
        })
    }

    /// Backpropagates a gradient on the output and, optionally, on the input
    /// Jacobian. Parameter gradients are added into `grad` (same layout as
    /// [`ShallowNet::params`]); the gradient with respect to the input is
    /// returned.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        g_out: &[f64],
        g_jac: Option<&DMatrix<f64>>,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let (d_in, hid, d_out) = (self.d_in, self.hidden, self.d_out);
        let o_b1 = self.w1.len();
        let o_w2 = o_b1 + hid;
        let o_b2 = o_w2 + self.w2.len();
        let mut g_pre = vec![0.0; hid];
        for o in 0..d_out {
            grad[o_b2 + o] += g_out[o];
            for h in 0..hid {
                grad[o_w2 + o * hid + h] += g_out[o] * cache.act[h];
                g_pre[h] += self.w2[o * hid + h] * g_out[o] * cache.d1[h];
            }
        }
        let mut g_in = vec![0.0; d_in];
        if let Some(gj) = g_jac {
            // J = W2 diag(σ') W1
            for h in 0..hid {
                // (W2ᵀ G)_h,i for each input i
                let mut w2g = vec![0.0; d_in];
                for o in 0..d_out {
                    let w = self.w2[o * hid + h];
                    if w == 0.0 {
                        continue;
                    }
                    for i in 0..d_in {
                        w2g[i] += w * gj[(o, i)];
                    }
                }
                let mut g_d1 = 0.0;
                for i in 0..d_in {
                    let w1 = self.w1[h * d_in + i];
                    grad[h * d_in + i] += cache.d1[h] * w2g[i];
                    g_d1 += w2g[i] * w1;
                }
                for o in 0..d_out {
                    let mut s = 0.0;
                    for i in 0..d_in {
                        s += gj[(o, i)] * self.w1[h * d_in + i];
                    }
                    grad[o_w2 + o * hid + h] += s * cache.d1[h];
                }
                g_pre[h] += g_d1 * cache.d2[h];
            }
        }
        for h in 0..hid {
            let g = g_pre[h];
            if g == 0.0 {
                continue;
            }
            grad[o_b1 + h] += g;
            for i in 0..d_in {
                grad[h * d_in + i] += g * cache.input[i];
                g_in[i] += g * self.w1[h * d_in + i];
            }
        }
        g_in
    }
}
