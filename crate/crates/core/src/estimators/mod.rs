//! Statistical estimators shared by the analyses.

mod dcor;
mod fisher;
mod gaussian;
mod ksg;
mod mine;
mod pca;

pub use dcor::{distance_correlation, DEFAULT_MAX_N};
pub use fisher::{local_kl_quadratic, FisherFamily, FisherModel};
pub use gaussian::{fit_gaussian, gaussian_kl, GaussianStats};
pub use ksg::{ksg_mi, mixed_mi, KsgResult, DEFAULT_K, JITTER};
pub use mine::{mine_estimate, MineConfig, MineCritic, MineResult};
pub use pca::{clamp_k, pca_reduce, Pca, PCA_TARGET};

use nalgebra::DMatrix;

use crate::error::Result;

pub const DEFAULT_SHRINKAGE: f64 = 0.05;

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (na, d) = a.shape();
    DMatrix::from_fn(na + b.nrows(), d, |i, j| if i < na { a[(i, j)] } else { b[(i - na, j)] })
}

/// `KL(p_a ‖ p_b)` between shrinkage Gaussians fitted on a shared PCA
/// projection (basis fitted on the union of both sample sets).
pub fn representation_kl(a: &DMatrix<f64>, b: &DMatrix<f64>, shrinkage: f64) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(crate::error::MsmaError::DimensionMismatch(format!(
            "representation_kl between widths {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let union = stack_rows(a, b);
    let k = clamp_k(a.nrows().min(b.nrows()), a.ncols(), PCA_TARGET);
    let pca = Pca::fit(&union, k)?;
    let p = fit_gaussian(&pca.transform(a), shrinkage)?;
    let q = fit_gaussian(&pca.transform(b), shrinkage)?;
    gaussian_kl(&p, &q)
}

/// KSG MI after projecting each side to at most [`PCA_TARGET`] dimensions.
pub fn representation_mi(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize, seed: u64) -> Result<KsgResult> {
    let reduce = |x: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        if x.ncols() <= PCA_TARGET {
            Ok(x.clone())
        } else {
            Ok(pca_reduce(x, clamp_k(x.nrows(), x.ncols(), PCA_TARGET))?.0)
        }
    };
    ksg_mi(&reduce(a)?, &reduce(b)?, k, seed)
}
