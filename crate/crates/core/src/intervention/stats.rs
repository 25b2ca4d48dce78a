//! Paired nonparametric statistics: Wilcoxon signed-rank, Cliff's delta,
//! Benjamini–Hochberg adjustment and percentile bootstrap intervals.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{MsmaError, Result};
use crate::numeric::{average_ranks, quantile, rng};

/// Largest count of nonzero differences handled by the exact distribution.
pub const EXACT_MAX_N: usize = 25;
/// Fewest nonzero differences accepted by [`wilcoxon_signed_rank`].
pub const MIN_NONZERO: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Nonzero differences used.
    pub n: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// `(#{x > y} − #{x < y}) / (n·m)` over all pairs.
pub fn cliffs_delta(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(MsmaError::validation("samples", "Cliff's delta needs two nonempty samples"));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(MsmaError::validation("samples", "NaN in sample"));
    }
    let mut ys = y.to_vec();
    ys.sort_by(f64::total_cmp);
    let mut net: i64 = 0;
    for &v in x {
        let below = ys.partition_point(|&w| w < v);
        let not_above = ys.partition_point(|&w| w <= v);
        net += below as i64 - (ys.len() - not_above) as i64;
    }
    Ok(net as f64 / (x.len() * ys.len()) as f64)
}

/// Two-sided signed-rank test on paired differences. Zeros are dropped;
/// ties share average ranks. Exact for up to [`EXACT_MAX_N`] nonzero
/// differences, normal approximation with continuity correction above.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<Wilcoxon> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(MsmaError::validation("diffs", "non-finite difference"));
    }
    let nz = diffs.iter().filter(|&&d| d != 0.0).count();
    if nz == 0 {
        return Err(MsmaError::Precondition("all differences are zero".into()));
    }
    if nz < MIN_NONZERO {
        return Err(MsmaError::Precondition(format!(
            "signed-rank test needs ≥ {MIN_NONZERO} nonzero differences, got {nz}"
        )));
    }
    Ok(signed_rank(diffs))
}

/// Signed-rank test without the sample-size guard; all-zero input gives
/// `p = 1`.
pub(crate) fn signed_rank(diffs: &[f64]) -> Wilcoxon {
    let d: Vec<f64> = diffs.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Wilcoxon {
            w_plus: 0.0,
            n: 0,
            p: 1.0,
            exact: true,
        };
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= EXACT_MAX_N {
        let p = exact_p(&ranks, w_plus);
        return Wilcoxon {
            w_plus,
            n,
            p,
            exact: true,
        };
    }
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Wilcoxon {
        w_plus,
        n,
        p: (2.0 * std.sf(z)).min(1.0),
        exact: false,
    }
}

/// Exact two-sided p from the sign-flip distribution of the given ranks.
/// Ranks are doubled so tied half-ranks stay integral.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = r2.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &r2 {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w = (2.0 * w_plus).round() as usize;
    let lower: f64 = counts[..=w].iter().sum();
    let upper: f64 = counts[w..].iter().sum();
    (2.0 * lower.min(upper) / all).min(1.0)
}

/// Benjamini–Hochberg step-up adjusted p-values, in input order.
pub fn bh_fdr(pvals: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvals.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(MsmaError::validation("pvals", format!("p-value {p} outside (0, 1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        let scaled = if rank + 1 == m { pvals[i] } else { pvals[i] * m as f64 / (rank + 1) as f64 };
        running = running.min(scaled);
        out[i] = running.max(pvals[i]);
    }
    Ok(out)
}

/// Percentile bootstrap interval of `stat` at confidence `level`.
pub fn bootstrap_ci<F: Fn(&[f64]) -> f64>(
    stat: F,
    samples: &[f64],
    reps: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples.len() < 10 {
        return Err(MsmaError::validation("samples", format!("bootstrap needs ≥ 10 samples, got {}", samples.len())));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MsmaError::validation("level", "must be in (0, 1)"));
    }
    // each tail must hold at least one resample
    let min_reps = (2.0 / (1.0 - level)).ceil() as usize;
    if reps < min_reps {
        return Err(MsmaError::validation(
            "reps",
            format!("insufficient resamples: {reps} < {min_reps} for level {level}"),
        ));
    }
    let n = samples.len();
    let mut r = rng(seed);
    let mut buf = vec![0.0; n];
    let stats: Vec<f64> = (0..reps)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = samples[r.random_range(0..n)];
            }
            stat(&buf)
        })
        .collect();
    let a = (1.0 - level) / 2.0;
    Ok((quantile(&stats, a), quantile(&stats, 1.0 - a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::mean;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    /// Two-sided p by listing every sign pattern.
    fn enumerate_p(abs: &[f64]) -> impl Fn(f64) -> f64 {
        let ranks = average_ranks(abs);
        let n = ranks.len();
        let sums: Vec<f64> = (0u32..1 << n)
            .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum())
            .collect();
        move |w| {
            let lo = sums.iter().filter(|&&s| s <= w + 1e-9).count() as f64;
            let hi = sums.iter().filter(|&&s| s >= w - 1e-9).count() as f64;
            (2.0 * lo.min(hi) / sums.len() as f64).min(1.0)
        }
    }

    #[test]
    fn wilcoxon_all_positive_six() {
        let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(w.p, 2.0 / 64.0);
        assert_eq!(w.w_plus, 21.0);
    }

    #[test]
    fn wilcoxon_symmetric_pairs_give_one() {
        let w = wilcoxon_signed_rank(&[1.0, -1.0, 2.0, -2.0, 3.0, -3.0]).unwrap();
        assert_eq!(w.p, 1.0);
    }

    #[test]
    fn wilcoxon_guards() {
        assert!(wilcoxon_signed_rank(&[0.0; 8]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0, 2.0, 0.0, 0.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0, f64::NAN, 2.0, 3.0, 4.0]).unwrap_err().is_validation());
        assert_eq!(signed_rank(&[0.0, 0.0]).p, 1.0);
    }

    #[test]
    fn wilcoxon_large_shift_is_significant() {
        let mut r = rng(5);
        let d: Vec<f64> = (0..200).map(|_| 0.5 + { let z: f64 = StandardNormal.sample(&mut r); z }).collect();
        let w = wilcoxon_signed_rank(&d).unwrap();
        assert!(!w.exact && w.p < 1e-3, "{}", w.p);
    }

    #[test]
    fn wilcoxon_normal_branch_is_close_to_exact_at_the_switch() {
        let mut r = rng(6);
        let d: Vec<f64> = (0..26).map(|_| 0.3 + { let z: f64 = StandardNormal.sample(&mut r); z }).collect();
        let approx = signed_rank(&d).p;
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let exact = exact_p(&average_ranks(&abs), signed_rank(&d).w_plus);
        assert!((approx - exact).abs() < 0.01, "{approx} vs {exact}");
    }

    #[test]
    fn cliffs_examples() {
        assert_eq!(cliffs_delta(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cliffs_delta(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cliffs_delta(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), -0.5);
        assert!(cliffs_delta(&[], &[1.0]).is_err());
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh_fdr(&[0.03]).unwrap(), vec![0.03]);
        assert_eq!(bh_fdr(&[0.01, 0.02, 0.03, 0.04]).unwrap(), vec![0.04; 4]);
        let adj = bh_fdr(&[0.04, 0.001, 0.5, 0.02]).unwrap();
        assert_eq!(adj, vec![0.04 * 4.0 / 3.0, 0.004, 0.5, 0.04]);
        assert!(bh_fdr(&[0.0]).is_err());
        assert!(bh_fdr(&[1.5]).is_err());
        assert!(bh_fdr(&[]).unwrap().is_empty());
    }

    #[test]
    fn bootstrap_constant_and_guards() {
        let c = vec![3.5; 20];
        assert_eq!(bootstrap_ci(mean, &c, 200, 0.95, 1).unwrap(), (3.5, 3.5));
        let err = bootstrap_ci(mean, &c, 1, 0.95, 1).unwrap_err();
        assert!(err.to_string().contains("insufficient resamples"));
        assert!(bootstrap_ci(mean, &c[..5], 200, 0.95, 1).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let mut r = rng(2);
        let s: Vec<f64> = (0..50).map(|_| StandardNormal.sample(&mut r)).collect();
        let a = bootstrap_ci(mean, &s, 300, 0.9, 4).unwrap();
        assert_eq!(a, bootstrap_ci(mean, &s, 300, 0.9, 4).unwrap());
        assert!(a.0 < mean(&s) && mean(&s) < a.1);
    }

    proptest! {
        #[test]
        fn exact_p_matches_enumeration(
            raw in proptest::collection::vec((1u8..6, any::<bool>()), 5..=12),
        ) {
            // small integer magnitudes force ties
            let d: Vec<f64> = raw.iter().map(|&(m, s)| if s { m as f64 } else { -(m as f64) }).collect();
            let w = wilcoxon_signed_rank(&d).unwrap();
            let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
            prop_assert!((w.p - enumerate_p(&abs)(w.w_plus)).abs() < 1e-12);
            prop_assert!(w.p > 0.0 && w.p <= 1.0);
        }

        #[test]
        fn cliffs_is_antisymmetric_and_bounded(
            x in proptest::collection::vec(-5i32..5, 1..8),
            y in proptest::collection::vec(-5i32..5, 1..8),
        ) {
            let x: Vec<f64> = x.into_iter().map(f64::from).collect();
            let y: Vec<f64> = y.into_iter().map(f64::from).collect();
            let a = cliffs_delta(&x, &y).unwrap();
            prop_assert_eq!(a, -cliffs_delta(&y, &x).unwrap());
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn bh_dominates_input_and_keeps_order(p in proptest::collection::vec(1e-6f64..=1.0, 1..20)) {
            let adj = bh_fdr(&p).unwrap();
            prop_assert!(adj.iter().zip(&p).all(|(a, q)| a >= q && *a <= 1.0));
            // adjusted values are ordered like the raw ones
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if p[i] < p[j] {
                        prop_assert!(adj[i] <= adj[j]);
                    }
                }
            }
        }

        #[test]
        fn bh_fixes_plateaus(c in 1e-6f64..=1.0, m in 1usize..30) {
            // step-up fixed points are constant vectors, the shape of a
            // fully tied adjusted family
            let p = vec![c; m];
            prop_assert_eq!(bh_fdr(&p).unwrap(), p);
        }
    }
}
