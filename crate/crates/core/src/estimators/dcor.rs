//! Székely distance correlation from U-centred distance matrices, which
//! removes the positive small-sample bias of the plain double-centred form.

use nalgebra::DMatrix;

use crate::error::{MsmaError, Result};
use crate::numeric::{permutation, rng, select_rows};

pub const DEFAULT_MAX_N: usize = 2000;

fn centered_distances(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().cloned().collect()).collect();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    // U-centring: a_ij - a_i./(n-2) - a_.j/(n-2) + a../((n-1)(n-2)), zero diagonal
    let nf = n as f64;
    let row_sums: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>()).collect();
    let total = row_sums.iter().sum::<f64>();
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = if i == j {
                0.0
            } else {
                d[i * n + j] - (row_sums[i] + row_sums[j]) / (nf - 2.0) + total / ((nf - 1.0) * (nf - 2.0))
            };
        }
    }
    d
}

fn u_product(a: &[f64], b: &[f64], n: usize) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / (n * (n - 3)) as f64
}

/// Distance correlation in `[0, 1]` (negative bias-corrected estimates
/// clip to 0); inputs larger than `max_n` rows are
/// subsampled without replacement using `seed`.
pub fn distance_correlation(x: &DMatrix<f64>, y: &DMatrix<f64>, max_n: usize, seed: u64) -> Result<f64> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(MsmaError::DimensionMismatch(format!("dcor with {n} and {} samples", y.nrows())));
    }
    if n < 4 {
        return Err(MsmaError::Precondition(format!("distance_correlation needs n ≥ 4, got {n}")));
    }
    let (x, y) = if n > max_n.max(4) {
        let mut idx = permutation(&mut rng(seed), n);
        idx.truncate(max_n.max(4));
        idx.sort_unstable();
        (select_rows(x, &idx), select_rows(y, &idx))
    } else {
        (x.clone(), y.clone())
    };
    let a = centered_distances(&x);
    let b = centered_distances(&y);
    let m = x.nrows();
    let vxy = u_product(&a, &b, m);
    let vxx = u_product(&a, &a, m);
    let vyy = u_product(&b, &b, m);
    if vxx <= 0.0 || vyy <= 0.0 {
        return Ok(0.0);
    }
    Ok((vxy.max(0.0) / (vxx * vyy).sqrt()).sqrt().min(1.0))
}
