//! MINE: a neural lower bound on mutual information from the
//! Donsker–Varadhan representation `I ≥ E_joint[T] − log E_marg[e^T]`.
//!
//! The denominator gradient uses an exponential moving average of
//! `E_marg[e^T]` (kept in log space) to reduce minibatch bias.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};
use crate::nn::{Activation, Adam, AdamConfig, Mlp};
use crate::numeric::{check_finite, permutation, rng, select_rows, standardize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub hidden: usize,
    pub depth: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub ema_rate: f64,
    /// Marginal shuffles averaged in the final full-sample evaluation.
    pub eval_permutations: usize,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            hidden: 128,
            depth: 2,
            lr: 1e-4,
            batch: 128,
            steps: 2000,
            ema_rate: 0.01,
            eval_permutations: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineResult {
    /// DV bound of the trained critic on the full sample.
    pub bound: f64,
    /// EMA-smoothed minibatch bound at the last step.
    pub ema_bound: f64,
    /// Minibatch bound per step.
    pub trace: Vec<f64>,
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.iter().map(|t| (t - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn concat(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, dx) = x.shape();
    let dy = y.ncols();
    DMatrix::from_fn(n, dx + dy, |i, j| if j < dx { x[(i, j)] } else { y[(i, j - dx)] })
}

/// The critic `T_φ(x, y)` with its optimizer and denominator EMA.
#[derive(Debug, Clone)]
pub struct MineCritic {
    pub net: Mlp,
    adam: Adam,
    log_ema: Option<f64>,
    ema_rate: f64,
    dx: usize,
}

impl MineCritic {
    pub fn new<R: Rng + ?Sized>(dx: usize, dy: usize, cfg: &MineConfig, rng: &mut R) -> Self {
        let mut sizes = vec![dx + dy];
        sizes.extend(std::iter::repeat_n(cfg.hidden, cfg.depth));
        sizes.push(1);
        let net = Mlp::new(&sizes, Activation::Relu, rng);
        let adam = Adam::new(net.n_params(), AdamConfig::with_lr(cfg.lr));
        MineCritic {
            net,
            adam,
            log_ema: None,
            ema_rate: cfg.ema_rate,
            dx,
        }
    }

    /// DV bound on paired rows `(x, y)` against marginal pairs `(x, y_marg)`.
    pub fn bound(&self, x: &DMatrix<f64>, y: &DMatrix<f64>, y_marg: &DMatrix<f64>) -> f64 {
        let tj = self.net.forward(&concat(x, y));
        let tm = self.net.forward(&concat(x, y_marg));
        tj.mean() - log_mean_exp(tm.as_slice())
    }

    /// One ascent step on the bound; returns the batch bound before the update.
    pub fn train_step(&mut self, x: &DMatrix<f64>, y: &DMatrix<f64>, y_marg: &DMatrix<f64>) -> f64 {
        let b = x.nrows() as f64;
        let trj = self.net.forward_trace(&concat(x, y));
        let trm = self.net.forward_trace(&concat(x, y_marg));
        let tm = trm.output().as_slice().to_vec();
        let lme = log_mean_exp(&tm);
        let bound = trj.output().mean() - lme;
        let r = self.ema_rate;
        let log_ema = match self.log_ema {
            None => lme,
            Some(prev) => log_add_exp((1.0 - r).ln() + prev, r.ln() + lme),
        };
        self.log_ema = Some(log_ema);
        // loss = −bound; marginal weights use the EMA denominator
        let dj = DMatrix::from_element(x.nrows(), 1, -1.0 / b);
        let dm = DMatrix::from_iterator(x.nrows(), 1, tm.iter().map(|t| (t - log_ema).exp() / b));
        let (gj, _) = self.net.backward(&trj, &dj);
        let (gm, _) = self.net.backward(&trm, &dm);
        let grads: Vec<f64> = gj.iter().zip(&gm).map(|(a, c)| a + c).collect();
        let mut p = self.net.params();
        self.adam.step(&mut p, &grads);
        self.net.set_params(&p);
        bound
    }

    /// Bound and its gradient with respect to `x` (which appears in both the
    /// joint and the marginal pairs).
    pub fn bound_grad_x(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        y_marg: &DMatrix<f64>,
    ) -> (f64, DMatrix<f64>) {
        let b = x.nrows() as f64;
        let trj = self.net.forward_trace(&concat(x, y));
        let trm = self.net.forward_trace(&concat(x, y_marg));
        let tm = trm.output().as_slice();
        let lme = log_mean_exp(tm);
        let bound = trj.output().mean() - lme;
        let dj = DMatrix::from_element(x.nrows(), 1, 1.0 / b);
        let dm = DMatrix::from_iterator(x.nrows(), 1, tm.iter().map(|t| -(t - lme).exp() / b));
        let (_, xj) = self.net.backward(&trj, &dj);
        let (_, xm) = self.net.backward(&trm, &dm);
        let g = xj.columns(0, self.dx).into_owned() + xm.columns(0, self.dx);
        (bound, g)
    }
}

/// Sample `size` row indices: without replacement when possible.
pub(crate) fn sample_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    if size >= n {
        return permutation(rng, n);
    }
    let mut idx = permutation(rng, n);
    idx.truncate(size);
    idx
}

pub fn mine_estimate(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &MineConfig) -> Result<MineResult> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(MsmaError::DimensionMismatch(format!("mine with {n} and {} samples", y.nrows())));
    }
    if n < 256 {
        return Err(MsmaError::Precondition(format!("mine_estimate needs n ≥ 256, got {n}")));
    }
    check_finite(x, "mine x")?;
    check_finite(y, "mine y")?;
    let xs = standardize(x);
    let ys = standardize(y);
    let mut r = rng(cfg.seed);
    let mut critic = MineCritic::new(x.ncols(), y.ncols(), cfg, &mut r);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut ema_bound: Option<f64> = None;
    for step in 0..cfg.steps {
        let idx = sample_batch(&mut r, n, cfg.batch);
        let midx = sample_batch(&mut r, n, cfg.batch);
        let xb = select_rows(&xs, &idx);
        let yb = select_rows(&ys, &idx);
        let ym = select_rows(&ys, &midx);
        let b = critic.train_step(&xb, &yb, &ym);
        trace.push(b);
        if !b.is_finite() || !critic.net.is_finite() {
            return Err(MsmaError::Diverged {
                step,
                reason: "non-finite MINE bound".into(),
                trace,
            });
        }
        ema_bound = Some(match ema_bound {
            None => b,
            Some(e) => (1.0 - cfg.ema_rate) * e + cfg.ema_rate * b,
        });
    }
    let mut total = 0.0;
    for _ in 0..cfg.eval_permutations.max(1) {
        let p = permutation(&mut r, n);
        total += critic.bound(&xs, &ys, &select_rows(&ys, &p));
    }
    let bound = total / cfg.eval_permutations.max(1) as f64;
    if !bound.is_finite() {
        return Err(MsmaError::Diverged {
            step: cfg.steps,
            reason: "non-finite final bound".into(),
            trace,
        });
    }
    Ok(MineResult {
        bound,
        ema_bound: ema_bound.unwrap_or(0.0),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::normal_matrix;

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[1000.0, 1000.0]) - 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = rng(3);
        let cfg = MineConfig {
            hidden: 8,
            ..MineConfig::default()
        };
        let critic = MineCritic::new(2, 1, &cfg, &mut r);
        let x = normal_matrix(&mut r, 6, 2);
        let y = normal_matrix(&mut r, 6, 1);
        let ym = normal_matrix(&mut r, 6, 1);
        let (_, g) = critic.bound_grad_x(&x, &y, &ym);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = critic.bound(&xp, &y, &ym);
            xp[i] -= 2.0 * h;
            let dn = critic.bound(&xp, &y, &ym);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rejects_small_samples() {
        let x = DMatrix::zeros(100, 1);
        assert!(mine_estimate(&x, &x, &MineConfig::default()).is_err());
    }
}
