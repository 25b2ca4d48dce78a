//! Error accumulation along a Gaussian chain `h_G → h_I → h_L`.
//!
//! Each stage is `y = x·M + c + σ·ξ`. The check samples the true chain and
//! an aligned chain with shared noise draws, measures the Gaussian KL of
//! every stage (aligned stage fed the true input) and of the fully composed
//! aligned chain, and reports their ratio.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};
use crate::estimators::{fit_gaussian, gaussian_kl};
use crate::nn::add_row_bias;
use crate::numeric::{normal_matrix, rng};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStage {
    pub m: DMatrix<f64>,
    pub c: DVector<f64>,
    pub noise: f64,
}

impl GaussianStage {
    fn apply(&self, x: &DMatrix<f64>, xi: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.m + xi * self.noise;
        add_row_bias(&mut y, &self.c);
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditivityReport {
    pub stage_kl: Vec<f64>,
    pub total_kl: f64,
    pub sum: f64,
    /// `total_kl / sum`; absent when every stage is exact.
    pub ratio: Option<f64>,
}

fn kl(truth: &DMatrix<f64>, aligned: &DMatrix<f64>) -> Result<f64> {
    gaussian_kl(&fit_gaussian(truth, 0.0)?, &fit_gaussian(aligned, 0.0)?)
}

/// Compare stage errors with the error of the composed aligned chain.
/// The source is `N(0, I_d)` with `n` samples.
pub fn error_additivity_check(
    truth: &[GaussianStage],
    aligned: &[GaussianStage],
    n: usize,
    seed: u64,
) -> Result<AdditivityReport> {
    if truth.is_empty() || truth.len() != aligned.len() {
        return Err(MsmaError::validation("stages", "need matching, nonempty true and aligned chains"));
    }
    let d = truth[0].m.nrows();
    let mut r = rng(seed);
    let x = normal_matrix(&mut r, n, d);
    let noise: Vec<DMatrix<f64>> = truth.iter().map(|s| normal_matrix(&mut r, n, s.m.ncols())).collect();
    let mut h_true = x.clone();
    let mut h_aligned = x;
    let mut stage_kl = Vec::with_capacity(truth.len());
    for ((t, a), xi) in truth.iter().zip(aligned).zip(&noise) {
        let next_true = t.apply(&h_true, xi);
        stage_kl.push(kl(&next_true, &a.apply(&h_true, xi))?);
        h_aligned = a.apply(&h_aligned, xi);
        h_true = next_true;
    }
    let total_kl = kl(&h_true, &h_aligned)?;
    let sum: f64 = stage_kl.iter().sum();
    Ok(AdditivityReport {
        ratio: (sum > 0.0).then(|| total_kl / sum),
        stage_kl,
        total_kl,
        sum,
    })
}

/// Identity-transition chain in `d` dimensions whose aligned stages carry
/// mean shifts sized to give stage KLs `eps` exactly (in closed form).
/// Stage noise levels are `σ = (0.5, 0.2)`; shifts use orthogonal axes.
pub fn planted_chain(d: usize, eps: (f64, f64)) -> Result<(Vec<GaussianStage>, Vec<GaussianStage>)> {
    if d < 2 {
        return Err(MsmaError::validation("d", "planted chain needs d ≥ 2"));
    }
    let sigma = [0.5, 0.2];
    let identity = |s: f64| GaussianStage {
        m: DMatrix::identity(d, d),
        c: DVector::zeros(d),
        noise: s,
    };
    let truth = vec![identity(sigma[0]), identity(sigma[1])];
    let var_i = 1.0 + sigma[0] * sigma[0];
    let var_l = var_i + sigma[1] * sigma[1];
    let mut a1 = identity(sigma[0]);
    a1.c[0] = (2.0 * eps.0 * var_i).sqrt();
    let mut a2 = identity(sigma[1]);
    a2.c[1] = (2.0 * eps.1 * var_l).sqrt();
    Ok((truth, vec![a1, a2]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_maps_give_zero() {
        let (t, _) = planted_chain(4, (0.1, 0.2)).unwrap();
        let rep = error_additivity_check(&t, &t, 2000, 1).unwrap();
        assert_eq!(rep.total_kl, 0.0);
        assert_eq!(rep.sum, 0.0);
        assert!(rep.ratio.is_none());
    }

    #[test]
    fn planted_stage_errors_are_recovered() {
        let (t, a) = planted_chain(4, (0.1, 0.2)).unwrap();
        let rep = error_additivity_check(&t, &a, 20_000, 2).unwrap();
        assert!((rep.stage_kl[0] - 0.1).abs() < 0.01, "{:?}", rep.stage_kl);
        assert!((rep.stage_kl[1] - 0.2).abs() < 0.02, "{:?}", rep.stage_kl);
    }

    #[test]
    fn dominant_stage_dominates_total() {
        let (t, a) = planted_chain(4, (1.0, 0.01)).unwrap();
        let rep = error_additivity_check(&t, &a, 20_000, 3).unwrap();
        assert!((rep.total_kl - 1.0).abs() <= 0.15, "{}", rep.total_kl);
    }

    #[test]
    fn mismatched_chains_rejected() {
        let (t, a) = planted_chain(3, (0.1, 0.1)).unwrap();
        assert!(error_additivity_check(&t, &a[..1], 100, 1).is_err());
        assert!(planted_chain(1, (0.1, 0.1)).is_err());
    }
}
