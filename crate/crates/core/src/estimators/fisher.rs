//! Fisher-metric quadratic approximation of local KL.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherFamily {
    /// `N(μ, σ²I)` with known `σ`; `θ = μ`.
    GaussianMean { sigma: f64 },
    /// 1-D `N(μ, σ²)`; `θ = (μ, σ)`.
    GaussianMeanVar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherModel {
    pub family: FisherFamily,
    pub theta: DVector<f64>,
}

impl FisherModel {
    pub fn gaussian_mean(mu: &[f64], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(MsmaError::validation("sigma", "must be > 0"));
        }
        Ok(FisherModel {
            family: FisherFamily::GaussianMean { sigma },
            theta: DVector::from_column_slice(mu),
        })
    }

    pub fn gaussian_mean_var(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(MsmaError::validation("sigma", "must be > 0"));
        }
        Ok(FisherModel {
            family: FisherFamily::GaussianMeanVar,
            theta: DVector::from_vec(vec![mu, sigma]),
        })
    }

    /// Analytic Fisher information at `θ`.
    pub fn fisher(&self) -> DMatrix<f64> {
        match self.family {
            FisherFamily::GaussianMean { sigma } => {
                DMatrix::identity(self.theta.len(), self.theta.len()) / (sigma * sigma)
            }
            FisherFamily::GaussianMeanVar => {
                let s2 = self.theta[1] * self.theta[1];
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0 / s2, 2.0 / s2]))
            }
        }
    }

    fn check(&self, dtheta: &DVector<f64>) -> Result<()> {
        if dtheta.len() != self.theta.len() {
            return Err(MsmaError::DimensionMismatch(format!(
                "dθ of length {} for θ of length {}",
                dtheta.len(),
                self.theta.len()
            )));
        }
        Ok(())
    }

    /// Exact `KL(p_θ ‖ p_{θ+dθ})`.
    pub fn exact_kl(&self, dtheta: &DVector<f64>) -> Result<f64> {
        self.check(dtheta)?;
        Ok(match self.family {
            FisherFamily::GaussianMean { sigma } => 0.5 * dtheta.norm_squared() / (sigma * sigma),
            FisherFamily::GaussianMeanVar => {
                let s = self.theta[1];
                let s2 = s + dtheta[1];
                if s2 <= 0.0 {
                    return Err(MsmaError::Precondition("σ + dσ must stay positive".into()));
                }
                (s2 / s).ln() + (s * s + dtheta[0] * dtheta[0]) / (2.0 * s2 * s2) - 0.5
            }
        })
    }
}

/// `½ dθᵀ F(θ) dθ`.
pub fn local_kl_quadratic(model: &FisherModel, dtheta: &DVector<f64>) -> Result<f64> {
    model.check(dtheta)?;
    Ok(0.5 * dtheta.dot(&(model.fisher() * dtheta)))
}
