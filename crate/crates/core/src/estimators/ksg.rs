//! k-nearest-neighbour mutual information (Kraskov–Stögbauer–Grassberger,
//! variant 1) under the max-norm, plus the discrete-label variant used when
//! one side is a class label.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{MsmaError, Result};
use crate::numeric::{check_finite, column_means, column_stds, rng};

pub const DEFAULT_K: usize = 5;
/// Relative magnitude of the tie-breaking jitter.
pub const JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsgResult {
    /// Estimate clamped at 0 for reporting.
    pub mi: f64,
    pub raw: f64,
    /// Duplicate joint points were present, or the estimate sits near the
    /// `ψ(n) − ψ(k)` ceiling the estimator can reach.
    pub near_deterministic: bool,
}

/// Row-major copy with seeded uniform jitter scaled per column.
fn jittered<R: Rng>(x: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let (n, d) = x.shape();
    let stds = column_stds(x, &column_means(x));
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            let scale = if stds[j] > 0.0 { stds[j] } else { 1.0 };
            out.push(x[(i, j)] + JITTER * scale * (rng.random::<f64>() - 0.5));
        }
    }
    out
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()))
}

fn has_duplicate_rows(x: &DMatrix<f64>, y: &DMatrix<f64>) -> bool {
    let n = x.nrows();
    let mut rows: Vec<Vec<u64>> = (0..n)
        .map(|i| {
            x.row(i)
                .iter()
                .chain(y.row(i).iter())
                .map(|v| v.to_bits())
                .collect()
        })
        .collect();
    rows.sort_unstable();
    rows.windows(2).any(|w| w[0] == w[1])
}

pub fn ksg_mi(x: &DMatrix<f64>, y: &DMatrix<f64>, k: usize, seed: u64) -> Result<KsgResult> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(MsmaError::DimensionMismatch(format!(
            "ksg_mi with {n} and {} samples",
            y.nrows()
        )));
    }
    if k == 0 || n <= k {
        return Err(MsmaError::Precondition(format!("ksg_mi needs n > k ≥ 1, got n = {n}, k = {k}")));
    }
    check_finite(x, "ksg_mi x")?;
    check_finite(y, "ksg_mi y")?;
    let duplicates = has_duplicate_rows(x, y);
    let mut r = rng(seed);
    let (dx, dy) = (x.ncols(), y.ncols());
    let xs = jittered(x, &mut r);
    let ys = jittered(y, &mut r);

    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; n], vec![0.0f64; n], vec![0.0f64; n]),
            |(ex, ey, joint), i| {
                let xi = &xs[i * dx..(i + 1) * dx];
                let yi = &ys[i * dy..(i + 1) * dy];
                for j in 0..n {
                    ex[j] = max_dist(xi, &xs[j * dx..(j + 1) * dx]);
                    ey[j] = max_dist(yi, &ys[j * dy..(j + 1) * dy]);
                    joint[j] = ex[j].max(ey[j]);
                }
                joint[i] = f64::INFINITY;
                let mut sel = joint.clone();
                let (_, eps, _) = sel.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
                let eps = *eps;
                let mut nx = 0usize;
                let mut ny = 0usize;
                for j in 0..n {
                    if j != i {
                        nx += usize::from(ex[j] < eps);
                        ny += usize::from(ey[j] < eps);
                    }
                }
                digamma(nx as f64 + 1.0) + digamma(ny as f64 + 1.0)
            },
        )
        .collect();
    let mean_term = terms.iter().sum::<f64>() / n as f64;
    let raw = digamma(k as f64) + digamma(n as f64) - mean_term;
    let ceiling = digamma(n as f64) - digamma(k as f64);
    Ok(KsgResult {
        mi: raw.max(0.0),
        raw,
        near_deterministic: duplicates || raw >= 0.9 * ceiling,
    })
}

/// MI between continuous `x` and class labels (nearest neighbours counted
/// within each class, then in the full sample). Points whose class is a
/// singleton are skipped.
pub fn mixed_mi(x: &DMatrix<f64>, labels: &[u32], k: usize, seed: u64) -> Result<f64> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(MsmaError::DimensionMismatch(format!(
            "mixed_mi with {n} samples and {} labels",
            labels.len()
        )));
    }
    if k == 0 || n <= k {
        return Err(MsmaError::Precondition(format!("mixed_mi needs n > k ≥ 1, got n = {n}")));
    }
    check_finite(x, "mixed_mi x")?;
    let d = x.ncols();
    let xs = jittered(x, &mut rng(seed));
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let terms: Vec<Option<(f64, f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nc = counts[&labels[i]];
            if nc < 2 {
                return None;
            }
            let kk = k.min(nc - 1);
            let xi = &xs[i * d..(i + 1) * d];
            let dist: Vec<f64> = (0..n).map(|j| max_dist(xi, &xs[j * d..(j + 1) * d])).collect();
            let mut same: Vec<f64> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .map(|j| dist[j])
                .collect();
            let (_, r, _) = same.select_nth_unstable_by(kk - 1, |a, b| a.total_cmp(b));
            let r = *r;
            let m = (0..n).filter(|&j| j != i && dist[j] <= r).count();
            Some((digamma(nc as f64), digamma(kk as f64), digamma(m as f64)))
        })
        .collect();
    let used: Vec<(f64, f64, f64)> = terms.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(MsmaError::Precondition("every class is a singleton".into()));
    }
    let m = used.len() as f64;
    let (a, b, c) = used
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, t| (acc.0 + t.0, acc.1 + t.1, acc.2 + t.2));
    Ok(digamma(m) - a / m + b / m - c / m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{normal_matrix, permutation, select_rows};
    use proptest::prelude::*;

    pub(crate) fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut r = rng(seed);
        let z = normal_matrix(&mut r, n, 2);
        let x = z.columns(0, 1).into_owned();
        let y = DMatrix::from_fn(n, 1, |i, _| rho * z[(i, 0)] + (1.0 - rho * rho).sqrt() * z[(i, 1)]);
        (x, y)
    }

    #[test]
    fn copy_is_near_deterministic() {
        let (x, _) = gaussian_pair(2000, 0.0, 1);
        let res = ksg_mi(&x, &x, 5, 0).unwrap();
        assert!(res.mi >= 2.0, "{res:?}");
        assert!(res.near_deterministic);
    }

    #[test]
    fn too_few_samples() {
        let x = DMatrix::zeros(5, 1);
        assert!(ksg_mi(&x, &x, 5, 0).is_err());
    }

    #[test]
    fn mixed_mi_recovers_label_entropy() {
        let n = 600;
        let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
        let x = DMatrix::from_fn(n, 3, |i, j| f64::from(u8::from(labels[i] as usize == j)));
        let mi = mixed_mi(&x, &labels, 5, 0).unwrap();
        assert!((mi - 3f64.ln()).abs() < 0.02, "{mi}");
    }

    #[test]
    fn mixed_mi_independent_is_small() {
        let mut r = rng(9);
        let x = normal_matrix(&mut r, 1000, 2);
        let labels: Vec<u32> = (0..1000).map(|i| (i % 4) as u32).collect();
        assert!(mixed_mi(&x, &labels, 5, 0).unwrap().abs() < 0.05);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn permutation_invariant(seed in 0u64..500) {
            let (x, y) = gaussian_pair(300, 0.6, seed);
            let p = permutation(&mut rng(seed + 1), 300);
            let a = ksg_mi(&x, &y, 5, 0).unwrap().raw;
            let b = ksg_mi(&select_rows(&x, &p), &select_rows(&y, &p), 5, 0).unwrap().raw;
            // only the jitter assignment moves with the permutation
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}
