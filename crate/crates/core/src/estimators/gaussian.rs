//! Shrinkage Gaussian fits and closed-form Gaussian KL.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};
use crate::numeric::check_finite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub shrinkage: f64,
}

impl GaussianStats {
    /// A Gaussian from explicit moments; `cov` must be symmetric to 1e-8.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(MsmaError::DimensionMismatch(format!(
                "mean of length {d} with covariance {}×{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-8 {
            return Err(MsmaError::validation("cov", "covariance is not symmetric"));
        }
        Ok(GaussianStats {
            mean,
            cov,
            shrinkage: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Unbiased mean and covariance, shrunk as `(1 − λ)·C + λ·(tr C / d)·I`.
pub fn fit_gaussian(x: &DMatrix<f64>, shrinkage: f64) -> Result<GaussianStats> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(MsmaError::Precondition(format!("fit_gaussian needs n ≥ 2, got {n}")));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(MsmaError::validation("shrinkage", format!("{shrinkage} outside [0, 1]")));
    }
    check_finite(x, "fit_gaussian input")?;
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
    let mut c = x.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let mut cov = c.transpose() * &c / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    if shrinkage > 0.0 {
        let target = cov.trace() / d as f64;
        cov *= 1.0 - shrinkage;
        for i in 0..d {
            cov[(i, i)] += shrinkage * target;
        }
    }
    Ok(GaussianStats {
        mean,
        cov,
        shrinkage,
    })
}

fn log_det_and_cholesky(cov: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    cov.clone()
        .cholesky()
        .ok_or_else(|| MsmaError::Numerical(format!("{what} covariance is singular")))
}

/// `KL(p ‖ q)` in nats between Gaussians.
pub fn gaussian_kl(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(MsmaError::DimensionMismatch(format!(
            "gaussian_kl between dimensions {d} and {}",
            q.dim()
        )));
    }
    if p.mean == q.mean && p.cov == q.cov {
        return Ok(0.0);
    }
    let cq = log_det_and_cholesky(&q.cov, "q")?;
    let cp = log_det_and_cholesky(&p.cov, "p")?;
    let log_det = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    let trace = cq.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&cq.solve(&diff));
    let kl = 0.5 * (trace + maha - d as f64 + log_det(&cq) - log_det(&cp));
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{normal_matrix, rng};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn g1(mu: f64, var: f64) -> GaussianStats {
        GaussianStats::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
    }

    /// Monte Carlo `E_p[log p − log q]` for 1-D Gaussians.
    fn mc_kl(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
        let mut r = rng(99);
        let lp = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + v.ln());
        let n = 400_000;
        (0..n)
            .map(|_| {
                let x = mp + vp.sqrt() * r.sample::<f64, _>(StandardNormal);
                lp(x, mp, vp) - lp(x, mq, vq)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn one_dimensional_closed_forms() {
        let kl = gaussian_kl(&g1(0.0, 1.0), &g1(1.0, 1.0)).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        assert!((mc_kl(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 0.01);

        let kl = gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 4.0)).unwrap();
        let exact = 0.5 * (4f64.ln() + 0.25 - 1.0);
        assert!((kl - exact).abs() < 1e-12);
        assert!((kl - 0.3181).abs() < 1e-4);
        assert!((mc_kl(0.0, 1.0, 0.0, 4.0) - exact).abs() < 0.01);
    }

    #[test]
    fn identical_is_exactly_zero() {
        let mut r = rng(1);
        let x = normal_matrix(&mut r, 50, 4);
        let p = fit_gaussian(&x, 0.05).unwrap();
        assert_eq!(gaussian_kl(&p, &p.clone()).unwrap(), 0.0);
    }

    #[test]
    fn fit_recovers_identity_covariance() {
        let mut r = rng(2);
        let x = normal_matrix(&mut r, 10_000, 2);
        let g = fit_gaussian(&x, 0.0).unwrap();
        assert!((g.cov.clone() - DMatrix::identity(2, 2)).amax() < 0.05);
    }

    #[test]
    fn shrinkage_lifts_constant_column() {
        let mut r = rng(3);
        let mut x = normal_matrix(&mut r, 100, 3);
        x.column_mut(1).fill(2.0);
        assert_eq!(fit_gaussian(&x, 0.0).unwrap().cov[(1, 1)], 0.0);
        let g = fit_gaussian(&x, 0.1).unwrap();
        assert!(g.cov[(1, 1)] > 0.0);
        let eig = g.cov.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(fit_gaussian(&DMatrix::zeros(1, 2), 0.0).is_err());
        let mut x = DMatrix::zeros(3, 2);
        x[(0, 0)] = f64::NAN;
        assert!(fit_gaussian(&x, 0.0).is_err());
        assert!(gaussian_kl(&g1(0.0, 1.0), &fit_gaussian(&DMatrix::identity(3, 2), 0.0).unwrap()).is_err());
        assert!(gaussian_kl(&g1(0.0, 1.0), &g1(0.0, 0.0)).is_err());
    }
}
