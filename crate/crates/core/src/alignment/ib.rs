//! Information-bottleneck diagnostic `Î(h₂; y) − β·Î(h₁; h₂)`.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::estimators::{mixed_mi, representation_mi, DEFAULT_K};

/// The label term uses the mixed continuous/discrete k-NN estimator so
/// class labels need no embedding; the redundancy term is KSG.
pub fn ib_objective_estimate(h1: &DMatrix<f64>, h2: &DMatrix<f64>, y: &[u32], beta: f64, seed: u64) -> Result<f64> {
    let relevant = mixed_mi(h2, y, DEFAULT_K, seed)?;
    let redundant = if beta == 0.0 {
        0.0
    } else {
        representation_mi(h1, h2, DEFAULT_K, seed)?.mi
    };
    Ok(relevant - beta * redundant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{normal_matrix, rng};
    use rand::Rng;

    #[test]
    fn independent_is_near_zero() {
        let mut r = rng(1);
        let n = 1000;
        let h1 = normal_matrix(&mut r, n, 2);
        let h2 = normal_matrix(&mut r, n, 2);
        let y: Vec<u32> = (0..n).map(|_| r.random_range(0..3)).collect();
        let v = ib_objective_estimate(&h1, &h2, &y, 1.0, 3).unwrap();
        assert!(v.abs() < 0.1, "{v}");
    }

    #[test]
    fn label_embedding_recovers_entropy() {
        let mut r = rng(2);
        let n = 1200;
        let y: Vec<u32> = (0..n).map(|_| r.random_range(0..4)).collect();
        let emb = normal_matrix(&mut r, 4, 3);
        let h2 = DMatrix::from_fn(n, 3, |i, j| emb[(y[i] as usize, j)]);
        let h1 = normal_matrix(&mut r, n, 3);
        let mut counts = [0.0f64; 4];
        y.iter().for_each(|&c| counts[c as usize] += 1.0);
        let h: f64 = counts.iter().map(|c| c / n as f64).map(|p| -p * p.ln()).sum();
        let v = ib_objective_estimate(&h1, &h2, &y, 0.0, 5).unwrap();
        assert!((v - h).abs() < 0.1, "{v} vs {h}");
    }

    #[test]
    fn redundant_copy_is_strongly_negative() {
        let mut r = rng(3);
        let n = 500;
        let h1 = normal_matrix(&mut r, n, 2);
        let y: Vec<u32> = (0..n).map(|_| r.random_range(0..2)).collect();
        let v = ib_objective_estimate(&h1, &h1, &y, 10.0, 1).unwrap();
        assert!(v < -10.0, "{v}");
    }
}
