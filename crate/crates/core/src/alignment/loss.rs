//! Loss configuration, the geometric term and the classifier heads.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};
use crate::nn::add_row_bias;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_geo: f64,
    pub lambda_info: f64,
    pub lambda_curv: f64,
    /// β of the information-bottleneck diagnostic.
    pub ib_beta: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_geo: 0.1,
            lambda_info: 0.1,
            lambda_curv: 0.01,
            ib_beta: 0.1,
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 128,
            epochs: 15,
        }
    }
}

impl LossConfig {
    pub fn with_lambdas(mut self, geo: f64, info: f64, curv: f64) -> Self {
        self.lambda_geo = geo;
        self.lambda_info = info;
        self.lambda_curv = curv;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_geo", self.lambda_geo),
            ("lambda_info", self.lambda_info),
            ("lambda_curv", self.lambda_curv),
            ("ib_beta", self.ib_beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MsmaError::validation(name, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(MsmaError::validation("lr", "must be > 0"));
        }
        if self.batch == 0 {
            return Err(MsmaError::validation("batch", "must be ≥ 1"));
        }
        Ok(())
    }

    /// `λ_geo·L_geo + λ_info·L_info + λ_curv·L_curv`.
    pub fn total(&self, geo: f64, info: f64, curv: f64) -> f64 {
        let mut t = 0.0;
        if self.lambda_geo > 0.0 {
            t += self.lambda_geo * geo;
        }
        if self.lambda_info > 0.0 {
            t += self.lambda_info * info;
        }
        if self.lambda_curv > 0.0 {
            t += self.lambda_curv * curv;
        }
        t
    }
}

/// Mean squared row distance `(1/n) Σ ‖mapped_i − target_i‖²` and its
/// gradient with respect to `mapped`.
pub fn geo_loss(mapped: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if mapped.shape() != target.shape() {
        return Err(MsmaError::DimensionMismatch(format!(
            "geometric loss between {:?} and {:?}",
            mapped.shape(),
            target.shape()
        )));
    }
    let n = mapped.nrows().max(1) as f64;
    let diff = mapped - target;
    Ok((diff.norm_squared() / n, diff * (2.0 / n)))
}

/// Softmax cross-entropy variants used by the heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadLoss {
    Plain,
    Temperature(f64),
    LabelSmoothing(f64),
}

/// Linear classifier `x·W + b` with its output loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub loss: HeadLoss,
}

impl Head {
    pub fn zeros(d: usize, k: usize, loss: HeadLoss) -> Self {
        Head {
            w: DMatrix::zeros(d, k),
            b: DVector::zeros(k),
            loss,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.b.len()
    }

    /// Mean cross-entropy over rows and `∂loss/∂logits` (pre-temperature).
    pub fn loss_and_dlogits(&self, x: &DMatrix<f64>, y: &[u32]) -> (f64, DMatrix<f64>) {
        let k = self.n_classes();
        let n = x.nrows();
        let mut z = x * &self.w;
        add_row_bias(&mut z, &self.b);
        let inv_t = match self.loss {
            HeadLoss::Temperature(t) => 1.0 / t,
            _ => 1.0,
        };
        let smooth = match self.loss {
            HeadLoss::LabelSmoothing(e) => e,
            _ => 0.0,
        };
        let mut loss = 0.0;
        let mut dz = DMatrix::zeros(n, k);
        for i in 0..n {
            let m = (0..k).map(|c| z[(i, c)] * inv_t).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..k).map(|c| (z[(i, c)] * inv_t - m).exp()).sum();
            let lse = m + s.ln();
            for c in 0..k {
                let logp = z[(i, c)] * inv_t - lse;
                let target = smooth / k as f64 + if c == y[i] as usize { 1.0 - smooth } else { 0.0 };
                loss -= target * logp;
                dz[(i, c)] = (logp.exp() - target) * inv_t / n as f64;
            }
        }
        (loss / n as f64, dz)
    }

    fn grads(&self, x: &DMatrix<f64>, dz: &DMatrix<f64>) -> Vec<f64> {
        let mut g: Vec<f64> = x.tr_mul(dz).as_slice().to_vec();
        g.extend(dz.column_iter().map(|c| c.sum()));
        g
    }
}

/// The global / mid / local classifiers trained alongside the maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHeads {
    pub global: Head,
    pub mid: Head,
    pub local: Head,
}

pub const DEFAULT_HEAD_DIMS: [usize; 3] = [62, 3, 3];
pub const DEFAULT_TAU: f64 = 2.0;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Inputs and labels for the three heads, in `[global, mid, local]` order.
pub struct HeadBatch<'a> {
    pub inputs: [&'a DMatrix<f64>; 3],
    pub labels: [&'a [u32]; 3],
}

impl ClassifierHeads {
    /// Zero-initialized heads (uniform predictions).
    pub fn new(d: usize, dims: [usize; 3], tau: f64, label_smoothing: f64) -> Self {
        ClassifierHeads {
            global: Head::zeros(d, dims[0], HeadLoss::Plain),
            mid: Head::zeros(d, dims[1], HeadLoss::Temperature(tau)),
            local: Head::zeros(d, dims[2], HeadLoss::LabelSmoothing(label_smoothing)),
        }
    }

    fn heads(&self) -> [&Head; 3] {
        [&self.global, &self.mid, &self.local]
    }

    fn heads_mut(&mut self) -> [&mut Head; 3] {
        [&mut self.global, &mut self.mid, &mut self.local]
    }

    pub fn check_labels(&self, labels: [&[u32]; 3]) -> Result<()> {
        for (h, (y, name)) in self.heads().iter().zip(labels.iter().zip(["global", "mid", "local"])) {
            if let Some(&bad) = y.iter().find(|&&c| c as usize >= h.n_classes()) {
                return Err(MsmaError::validation(
                    "head_dims",
                    format!("{name} head has {} outputs but label {bad} occurs", h.n_classes()),
                ));
            }
        }
        Ok(())
    }

    /// `L_cls = (H_global + H_mid + H_local) / 3` and its parameter gradient.
    pub fn loss_and_grads(&self, batch: &HeadBatch) -> (f64, Vec<f64>) {
        let mut total = 0.0;
        let mut g = Vec::with_capacity(self.n_params());
        for (h, (x, y)) in self.heads().iter().zip(batch.inputs.iter().zip(batch.labels)) {
            let (l, dz) = h.loss_and_dlogits(x, y);
            total += l / 3.0;
            g.extend(h.grads(x, &(dz / 3.0)));
        }
        (total, g)
    }

    pub fn n_params(&self) -> usize {
        self.heads().iter().map(|h| h.w.len() + h.b.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for h in self.heads() {
            p.extend_from_slice(h.w.as_slice());
            p.extend_from_slice(h.b.as_slice());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut off = 0;
        for h in self.heads_mut() {
            let n = h.w.len();
            h.w.as_mut_slice().copy_from_slice(&p[off..off + n]);
            off += n;
            let k = h.b.len();
            h.b.as_mut_slice().copy_from_slice(&p[off..off + k]);
            off += k;
        }
    }

    /// Held-out style accuracy of each head on the given inputs.
    pub fn accuracy(&self, batch: &HeadBatch) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, (h, (x, y))) in out.iter_mut().zip(self.heads().iter().zip(batch.inputs.iter().zip(batch.labels))) {
            let mut z = *x * &h.w;
            add_row_bias(&mut z, &h.b);
            let hits = z
                .row_iter()
                .zip(y)
                .filter(|(r, &t)| r.transpose().argmax().0 == t as usize)
                .count();
            *o = hits as f64 / y.len().max(1) as f64;
        }
        out
    }
}
