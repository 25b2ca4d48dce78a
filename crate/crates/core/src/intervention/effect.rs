//! Paired baseline-versus-intervened comparison over repeated runs.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{bh_fdr, bootstrap_ci, cliffs_delta, signed_rank};
use super::text::TextMetrics;
use crate::error::{MsmaError, Result};
use crate::numeric::{derive_seed, median};

/// One metric measured on paired runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedMetric {
    pub metric: String,
    pub baseline: Vec<f64>,
    pub intervened: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectConfig {
    pub bootstrap_reps: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for EffectConfig {
    fn default() -> Self {
        EffectConfig {
            bootstrap_reps: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEffect {
    pub metric: String,
    pub n: usize,
    /// Median over pairs of `100·(intervened − baseline)/baseline`; pairs
    /// with a zero baseline are skipped.
    pub median_change_pct: Option<f64>,
    /// `δ(intervened, baseline)`.
    pub cliffs_delta: f64,
    pub wilcoxon_p: f64,
    pub adjusted_p: f64,
    /// Bootstrap interval of the median change.
    pub ci: Option<(f64, f64)>,
    pub bootstrap_seed: u64,
    /// `*` below 0.05, `**` below 0.01 (adjusted).
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub config: EffectConfig,
    /// Largest number of pairs over metrics.
    pub repetitions: usize,
    pub metrics: Vec<MetricEffect>,
}

fn stars(p: f64) -> String {
    if p < 0.01 {
        "**".into()
    } else if p < 0.05 {
        "*".into()
    } else {
        String::new()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

impl EffectReport {
    pub fn get(&self, metric: &str) -> Option<&MetricEffect> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,n,median_change_pct,cliffs_delta,wilcoxon_p,adjusted_p,ci_lo,ci_hi,stars\n");
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6e},{:.6e},{},{},{}\n",
                m.metric,
                m.n,
                fmt_opt(m.median_change_pct),
                m.cliffs_delta,
                m.wilcoxon_p,
                m.adjusted_p,
                fmt_opt(m.ci.map(|c| c.0)),
                fmt_opt(m.ci.map(|c| c.1)),
                m.stars
            ));
        }
        out
    }
}

fn relative_changes(p: &PairedMetric) -> Vec<f64> {
    p.baseline
        .iter()
        .zip(&p.intervened)
        .filter(|(b, _)| **b != 0.0)
        .map(|(b, i)| 100.0 * (i - b) / b)
        .collect()
}

/// Per-metric effect sizes and tests, with BH adjustment across metrics.
/// Bootstrap seeds derive from `cfg.seed` and the metric's position.
pub fn run_effect_study(pairs: &[PairedMetric], cfg: &EffectConfig) -> Result<EffectReport> {
    if pairs.is_empty() {
        return Err(MsmaError::validation("metrics", "no metrics to compare"));
    }
    for p in pairs {
        if p.baseline.len() != p.intervened.len() {
            return Err(MsmaError::DimensionMismatch(format!(
                "metric {:?}: {} baseline vs {} intervened runs",
                p.metric,
                p.baseline.len(),
                p.intervened.len()
            )));
        }
        if p.baseline.is_empty() {
            return Err(MsmaError::validation("metrics", format!("metric {:?} has no runs", p.metric)));
        }
        if p.baseline.iter().chain(&p.intervened).any(|v| !v.is_finite()) {
            return Err(MsmaError::validation("metrics", format!("metric {:?} has non-finite values", p.metric)));
        }
    }
    let partial: Vec<Result<MetricEffect>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let diffs: Vec<f64> = p.intervened.iter().zip(&p.baseline).map(|(a, b)| a - b).collect();
            let rel = relative_changes(p);
            let seed = derive_seed(cfg.seed, i as u64);
            let ci = if rel.len() >= 10 {
                Some(bootstrap_ci(median, &rel, cfg.bootstrap_reps, cfg.level, seed)?)
            } else {
                None
            };
            Ok(MetricEffect {
                metric: p.metric.clone(),
                n: p.baseline.len(),
                median_change_pct: (!rel.is_empty()).then(|| median(&rel)),
                cliffs_delta: cliffs_delta(&p.intervened, &p.baseline)?,
                wilcoxon_p: signed_rank(&diffs).p,
                adjusted_p: f64::NAN,
                ci,
                bootstrap_seed: seed,
                stars: String::new(),
            })
        })
        .collect();
    let mut metrics = partial.into_iter().collect::<Result<Vec<_>>>()?;
    let adj = bh_fdr(&metrics.iter().map(|m| m.wilcoxon_p).collect::<Vec<_>>())?;
    for (m, a) in metrics.iter_mut().zip(adj) {
        m.adjusted_p = a;
        m.stars = stars(a);
    }
    Ok(EffectReport {
        config: cfg.clone(),
        repetitions: pairs.iter().map(|p| p.baseline.len()).max().unwrap_or(0),
        metrics,
    })
}

/// Pair per-run text metrics; only metrics present in every run are kept.
pub fn paired_from_text_metrics(base: &[TextMetrics], intervened: &[TextMetrics]) -> Result<Vec<PairedMetric>> {
    if base.len() != intervened.len() {
        return Err(MsmaError::DimensionMismatch(format!(
            "{} baseline vs {} intervened runs",
            base.len(),
            intervened.len()
        )));
    }
    let first = base.first().ok_or_else(|| MsmaError::validation("runs", "no runs"))?;
    let mut out = Vec::new();
    for (name, _) in first.values() {
        let get = |m: &TextMetrics| m.values().into_iter().find(|(k, _)| *k == name).map(|(_, v)| v);
        let b: Option<Vec<f64>> = base.iter().map(get).collect();
        let i: Option<Vec<f64>> = intervened.iter().map(get).collect();
        if let (Some(baseline), Some(intervened)) = (b, i) {
            out.push(PairedMetric {
                metric: name.to_string(),
                baseline,
                intervened,
            });
        }
    }
    Ok(out)
}

/// `run_id,metric,baseline,intervened` CSV (with header). Metrics keep
/// their order of first appearance.
pub fn read_paired_csv(path: &Path) -> Result<Vec<PairedMetric>> {
    #[derive(Deserialize)]
    struct Row {
        run_id: String,
        metric: String,
        baseline: f64,
        intervened: f64,
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => MsmaError::validation("input", format!("cannot read {}: {e}", path.display())),
        _ => e.into(),
    })?;
    let mut out: Vec<PairedMetric> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen = BTreeSet::new();
    for (line, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| MsmaError::validation("input", format!("row {}: {e}", line + 2)))?;
        if !seen.insert((row.run_id.clone(), row.metric.clone())) {
            return Err(MsmaError::validation(
                "input",
                format!("duplicate run {:?} for metric {:?}", row.run_id, row.metric),
            ));
        }
        let i = *index.entry(row.metric.clone()).or_insert_with(|| {
            out.push(PairedMetric {
                metric: row.metric.clone(),
                baseline: Vec::new(),
                intervened: Vec::new(),
            });
            out.len() - 1
        });
        out[i].baseline.push(row.baseline);
        out[i].intervened.push(row.intervened);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng;
    use rand_distr::{Distribution, Normal};
    use std::io::Write;

    fn noisy(r: &mut rand_chacha::ChaCha8Rng, n: usize, center: f64, sd: f64) -> Vec<f64> {
        let d = Normal::new(center, sd).unwrap();
        (0..n).map(|_| d.sample(r)).collect()
    }

    #[test]
    fn identical_runs_have_no_effect() {
        let mut r = rng(1);
        let b = noisy(&mut r, 30, 10.0, 1.0);
        let rep = run_effect_study(
            &[PairedMetric {
                metric: "m".into(),
                baseline: b.clone(),
                intervened: b,
            }],
            &EffectConfig::default(),
        )
        .unwrap();
        let m = &rep.metrics[0];
        assert_eq!((m.cliffs_delta, m.wilcoxon_p, m.adjusted_p), (0.0, 1.0, 1.0));
        assert_eq!(m.median_change_pct, Some(0.0));
        assert_eq!(m.stars, "");
        assert_eq!(rep.repetitions, 30);
    }

    #[test]
    fn planted_shift_is_detected() {
        let mut r = rng(2);
        let base = noisy(&mut r, 30, 8.0, 0.8);
        let shifted: Vec<f64> = base.iter().map(|v| v * 1.25 + Normal::new(0.0, 0.3).unwrap().sample(&mut r)).collect();
        let rep = run_effect_study(
            &[PairedMetric {
                metric: "sentence_count".into(),
                baseline: base,
                intervened: shifted,
            }],
            &EffectConfig::default(),
        )
        .unwrap();
        let m = rep.get("sentence_count").unwrap();
        assert!(m.cliffs_delta > 0.0 && m.adjusted_p < 0.05);
        let pct = m.median_change_pct.unwrap();
        assert!((pct - 25.0).abs() < 5.0, "{pct}");
        let (lo, hi) = m.ci.unwrap();
        assert!(lo <= pct && pct <= hi);
        assert_eq!(m.stars, "**");
    }

    #[test]
    fn unpaired_and_empty_inputs_error() {
        let p = PairedMetric {
            metric: "m".into(),
            baseline: vec![1.0, 2.0],
            intervened: vec![1.0],
        };
        assert!(run_effect_study(&[p], &EffectConfig::default()).unwrap_err().is_validation());
        assert!(run_effect_study(&[], &EffectConfig::default()).is_err());
    }

    #[test]
    fn zero_baselines_skip_relative_change() {
        let p = PairedMetric {
            metric: "m".into(),
            baseline: vec![0.0; 12],
            intervened: vec![1.0; 12],
        };
        let rep = run_effect_study(&[p], &EffectConfig::default()).unwrap();
        assert_eq!(rep.metrics[0].median_change_pct, None);
        assert!(rep.metrics[0].ci.is_none());
        assert!(rep.to_csv().contains(",NA,"));
    }

    #[test]
    fn csv_round_trip_and_duplicates() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "run_id,metric,baseline,intervened\nr1,a,1,2\nr1,b,3,3\nr2,a,1.5,2.5").unwrap();
        let p = read_paired_csv(f.path()).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].metric, "a");
        assert_eq!(p[0].intervened, vec![2.0, 2.5]);
        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "run_id,metric,baseline,intervened\nr1,a,1,2\nr1,a,1,2").unwrap();
        assert!(read_paired_csv(g.path()).unwrap_err().is_validation());
    }

    #[test]
    fn text_metrics_pair_up() {
        let t = |s: &str| super::super::text::text_metrics(s, None).unwrap();
        let base = vec![t("a b. c d."), t("e f g.")];
        let int = vec![t("a b c d."), t("e. f. g.")];
        let p = paired_from_text_metrics(&base, &int).unwrap();
        // coherence is missing for single-sentence runs, so it is dropped
        assert_eq!(p.len(), 3);
        assert_eq!(p[1].intervened, vec![1.0, 3.0]);
        assert!(paired_from_text_metrics(&base, &int[..1]).is_err());
    }
}
