//! Principal component projection.

use nalgebra::{DMatrix, DVector};

use crate::error::{MsmaError, Result};
use crate::numeric::{center, check_finite};

/// Default PCA target dimension before k-NN estimation and Gaussian fits.
pub const PCA_TARGET: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `d × k`, orthonormal columns ordered by explained variance.
    pub basis: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if k == 0 || k > n.min(d) {
            return Err(MsmaError::validation(
                "k",
                format!("PCA dimension {k} outside 1..={}", n.min(d)),
            ));
        }
        check_finite(x, "pca input")?;
        let (c, mean) = center(x);
        let denom = (n.max(2) - 1) as f64;
        let (basis, var) = if d <= n {
            let cov = c.transpose() * &c / denom;
            let eig = ((&cov + cov.transpose()) * 0.5).symmetric_eigen();
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
            let cols: Vec<_> = order[..k].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
            let var = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
            (DMatrix::from_columns(&cols), var)
        } else {
            // wide data: right singular vectors of the centered matrix
            let svd = c.clone().svd(false, true);
            let vt = svd.v_t.expect("requested v_t");
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| {
                svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b))
            });
            let cols: Vec<_> = order[..k].iter().map(|&i| vt.row(i).transpose()).collect();
            let var = order[..k]
                .iter()
                .map(|&i| svd.singular_values[i].powi(2) / denom)
                .collect();
            (DMatrix::from_columns(&cols), var)
        };
        let mut basis = basis;
        // sign convention: largest-magnitude loading positive
        for mut col in basis.column_iter_mut() {
            let imax = col.iamax();
            if col[imax] < 0.0 {
                col.neg_mut();
            }
        }
        Ok(Pca {
            mean,
            basis,
            explained_variance: var,
        })
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = x.clone();
        for (j, mut col) in c.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.mean[j]);
        }
        c * &self.basis
    }

    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = z * self.basis.transpose();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.mean[j]);
        }
        x
    }
}

/// PCA target clamped to `min(target, n − 1, d)` and at least 1.
pub fn clamp_k(n: usize, d: usize, target: usize) -> usize {
    target.min(n.saturating_sub(1)).min(d).max(1)
}

pub fn pca_reduce(x: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Pca)> {
    let p = Pca::fit(x, k)?;
    Ok((p.transform(x), p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{normal_matrix, rng};

    #[test]
    fn rank_two_data_reconstructs() {
        let mut r = rng(4);
        let x = normal_matrix(&mut r, 200, 2) * normal_matrix(&mut r, 2, 10);
        let (z, p) = pca_reduce(&x, 2).unwrap();
        let back = p.inverse_transform(&z);
        assert!((back - &x).amax() <= 1e-8);
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
    }

    #[test]
    fn basis_orthonormal_1000x100() {
        let mut r = rng(5);
        let x = normal_matrix(&mut r, 1000, 100);
        let p = Pca::fit(&x, 50).unwrap();
        let g = p.basis.transpose() * &p.basis;
        assert!((g - DMatrix::identity(50, 50)).amax() <= 1e-8);
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn wide_data_uses_svd_path() {
        let mut r = rng(6);
        let x = normal_matrix(&mut r, 8, 30);
        let p = Pca::fit(&x, 5).unwrap();
        let g = p.basis.transpose() * &p.basis;
        assert!((g - DMatrix::identity(5, 5)).amax() <= 1e-8);
        let q = Pca::fit(&x.transpose().transpose(), 5).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn k_out_of_range() {
        let x = DMatrix::zeros(5, 3);
        assert!(Pca::fit(&x, 0).is_err());
        assert!(Pca::fit(&x, 4).is_err());
        assert_eq!(clamp_k(5, 3, 50), 3);
        assert_eq!(clamp_k(3, 10, 50), 2);
    }
}
