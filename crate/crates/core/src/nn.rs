//! Dense feed-forward networks with hand-written backprop, plus Adam.
//!
//! Weights are stored `[in × out]` so a batch `X` (`n × in`) maps to
//! `X·W + 1·bᵀ`. Parameters flatten layer by layer as `W` (column-major)
//! followed by `b`; gradients use the same order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative given pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub activations: Vec<Activation>,
}

/// Intermediate values kept by [`Mlp::forward_trace`] for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

pub fn add_row_bias(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
}

impl Mlp {
    /// Layers of widths `sizes`; hidden layers use `hidden`, the output is linear.
    /// He-normal init for ReLU, LeCun-normal otherwise; zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut activations = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let last = l + 2 == sizes.len();
            let act = if last { Activation::Identity } else { hidden };
            let gain = if act == Activation::Relu { 2.0 } else { 1.0 };
            let std = (gain / w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[0], w[1], |_, _| {
                std * rng.sample::<f64, _>(StandardNormal)
            }));
            biases.push(DVector::zeros(w[1]));
            activations.push(act);
        }
        Mlp {
            weights,
            biases,
            activations,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("nonempty").ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = &h * w;
            add_row_bias(&mut z, b);
            z.apply(|v| *v = act.apply(*v));
            h = z;
        }
        h
    }

    pub fn forward_trace(&self, x: &DMatrix<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = &h * w;
            add_row_bias(&mut z, b);
            let y = z.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Trace {
            inputs,
            pre,
            output: h,
        }
    }

    /// Gradients of a scalar loss given `dout = ∂loss/∂output`.
    /// Returns flat parameter gradients and `∂loss/∂input`.
    pub fn backward(&self, trace: &Trace, dout: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n_layers = self.weights.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n_layers);
        let mut delta = dout.clone();
        for l in (0..n_layers).rev() {
            let act = self.activations[l];
            let y = if l + 1 == n_layers {
                &trace.output
            } else {
                &trace.inputs[l + 1]
            };
            let z = &trace.pre[l];
            for ((d, &zv), &yv) in delta.iter_mut().zip(z.iter()).zip(y.iter()) {
                *d *= act.derivative(zv, yv);
            }
            let gw = trace.inputs[l].transpose() * &delta;
            let gb = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            let next = &delta * self.weights[l].transpose();
            grads.push((gw, gb));
            delta = next;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in grads {
            flat.extend_from_slice(gw.as_slice());
            flat.extend_from_slice(gb.as_slice());
        }
        (flat, delta)
    }

    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.extend_from_slice(w.as_slice());
            p.extend_from_slice(b.as_slice());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter length");
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&p[off..off + n]);
            off += n;
            let m = b.len();
            b.as_mut_slice().copy_from_slice(&p[off..off + m]);
            off += m;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected moments over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let lr = self.cfg.lr;
        self.step_with_lr(params, grads, lr);
    }

    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}
