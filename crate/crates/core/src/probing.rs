//! Layerwise multinomial logistic probes.
//!
//! Each probe standardizes features with train-split statistics and runs
//! full-batch gradient descent with a cosine learning-rate schedule. The
//! step size is capped at `1/L` for the smoothness bound `L` of the
//! objective, so the training loss never increases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};
use crate::numeric::{derive_seed, permutation, rng, Standardizer};
use crate::repr_store::{LayerStack, Scale};
use nalgebra::{DMatrix, DMatrixView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub test_frac: f64,
    /// Random train/test splits averaged per (layer, task).
    pub seeds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.1,
            l2: 1e-3,
            test_frac: 0.2,
            seeds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub standardizer: Standardizer,
    /// `(d + 1) × k`; the last row is the bias.
    pub weights: DMatrix<f64>,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Objective before each epoch, then after the last one.
    pub loss_trace: Vec<f64>,
}

/// Seeded train/test split; the test side gets `round(n · test_frac)` rows (at least 1).
pub fn split(n: usize, test_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let idx = permutation(&mut rng(seed), n);
    let n_test = ((n as f64 * test_frac).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

fn design(x: &DMatrix<f64>, rows: &[usize], st: &Standardizer) -> DMatrix<f64> {
    let d = x.ncols();
    DMatrix::from_fn(rows.len(), d + 1, |i, j| {
        if j == d {
            1.0
        } else {
            (x[(rows[i], j)] - st.mean[j]) / st.scale[j]
        }
    })
}

/// Largest eigenvalue of `XᵀX / n`.
fn gram_top_eigenvalue(x: &DMatrix<f64>) -> f64 {
    let g = x.tr_mul(x) / x.nrows() as f64;
    g.symmetric_eigen().eigenvalues.max()
}

/// Design matrix and labels for a joint fit of several tasks.
struct Problem<'a> {
    /// `n × p`; the last column is the bias input.
    x: &'a DMatrix<f64>,
    n: usize,
    p: usize,
    ys: &'a [Vec<u32>],
    /// `(offset, k)` logit block of each task.
    blocks: &'a [(usize, usize)],
    /// Total logit count.
    kt: usize,
}

impl Problem<'_> {
    /// Per-task objective values and, when `grad` is given, the stacked
    /// gradient. `w` is `p × kt` column-major with the bias in the last
    /// row; tasks do not interact.
    fn objective(&self, w: &[f64], l2: f64, grad: Option<&mut [f64]>) -> Vec<f64> {
        let (n, p, kt) = (self.n, self.p, self.kt);
        let wm = DMatrixView::from_slice(w, p, kt);
        // logits, column c at z[c*n..]
        let mut zm = self.x * wm;
        let z = zm.as_mut_slice();
        let mut losses = vec![0.0; self.blocks.len()];
        let mut m = vec![0.0; n];
        let mut s = vec![0.0; n];
        for (t, &(off, k)) in self.blocks.iter().enumerate() {
            m.copy_from_slice(&z[off * n..(off + 1) * n]);
            for c in off + 1..off + k {
                for (mi, &zi) in m.iter_mut().zip(&z[c * n..(c + 1) * n]) {
                    if zi > *mi {
                        *mi = zi;
                    }
                }
            }
            let mut loss = 0.0;
            for (i, &y) in self.ys[t].iter().enumerate() {
                loss -= z[(off + y as usize) * n + i];
            }
            s.iter_mut().for_each(|v| *v = 0.0);
            for c in off..off + k {
                for ((zi, &mi), si) in z[c * n..(c + 1) * n].iter_mut().zip(&m).zip(s.iter_mut()) {
                    *zi = (*zi - mi).exp();
                    *si += *zi;
                }
            }
            for (&mi, &si) in m.iter().zip(&s) {
                loss += mi + si.ln();
            }
            for c in off..off + k {
                for (zi, &si) in z[c * n..(c + 1) * n].iter_mut().zip(&s) {
                    *zi /= si;
                }
            }
            for (i, &y) in self.ys[t].iter().enumerate() {
                z[(off + y as usize) * n + i] -= 1.0;
            }
            let reg: f64 = (off..off + k)
                .map(|c| w[c * p..c * p + p - 1].iter().map(|v| v * v).sum::<f64>())
                .sum();
            losses[t] = loss / n as f64 + 0.5 * l2 * reg;
        }
        if let Some(g) = grad {
            let gm = self.x.tr_mul(&zm);
            for c in 0..kt {
                for j in 0..p {
                    let mut v = gm[(j, c)] / n as f64;
                    if j + 1 < p {
                        v += l2 * w[c * p + j];
                    }
                    g[c * p + j] = v;
                }
            }
        }
        losses
    }
}

/// Fit one probe per label set on the same rows of `x`, sharing the
/// standardization and step size. Returns each probe with its loss trace.
pub fn fit_probes(
    x: &DMatrix<f64>,
    label_sets: &[(&[u32], usize)],
    rows: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<(Probe, Vec<f64>)>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MsmaError::validation("features", "non-finite probe features"));
    }
    let mut ys = Vec::with_capacity(label_sets.len());
    let mut blocks = Vec::with_capacity(label_sets.len());
    let mut off = 0;
    for &(labels, k) in label_sets {
        let y: Vec<u32> = rows.iter().map(|&i| labels[i]).collect();
        if let Some(&bad) = y.iter().find(|&&c| c as usize >= k) {
            return Err(MsmaError::validation("labels", format!("label {bad} ≥ n_classes {k}")));
        }
        if y.iter().all(|&c| c == y[0]) {
            return Err(MsmaError::Precondition("probe train split has a single class".into()));
        }
        ys.push(y);
        blocks.push((off, k));
        off += k;
    }
    let sub = crate::numeric::select_rows(x, rows);
    let st = Standardizer::fit(&sub);
    let p = x.ncols() + 1;
    let xd = design(x, rows, &st);
    let smooth = 0.5 * gram_top_eigenvalue(&xd) + cfg.l2;
    let base_lr = if smooth > 0.0 { cfg.lr.min(1.0 / smooth) } else { cfg.lr };
    let prob = Problem {
        x: &xd,
        n: xd.nrows(),
        p,
        ys: &ys,
        blocks: &blocks,
        kt: off,
    };
    let mut w = vec![0.0; p * off];
    let mut g = vec![0.0; p * off];
    let mut traces = vec![Vec::with_capacity(cfg.epochs + 1); blocks.len()];
    for epoch in 0..cfg.epochs {
        let losses = prob.objective(&w, cfg.l2, Some(&mut g));
        for (tr, l) in traces.iter_mut().zip(losses) {
            tr.push(l);
        }
        let lr = base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos());
        for (wv, gv) in w.iter_mut().zip(&g) {
            *wv -= lr * gv;
        }
    }
    for (tr, l) in traces.iter_mut().zip(prob.objective(&w, cfg.l2, None)) {
        tr.push(l);
    }
    let w = DMatrix::from_vec(p, off, w);
    Ok(blocks
        .iter()
        .zip(traces)
        .map(|(&(o, k), tr)| {
            (
                Probe {
                    standardizer: st.clone(),
                    weights: w.columns(o, k).into_owned(),
                    n_classes: k,
                },
                tr,
            )
        })
        .collect())
}

/// Fit a probe on `(x[rows], labels[rows])`.
pub fn fit_probe(
    x: &DMatrix<f64>,
    labels: &[u32],
    rows: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Probe, Vec<f64>)> {
    Ok(fit_probes(x, &[(labels, n_classes)], rows, cfg)?.remove(0))
}

impl Probe {
    pub fn predict(&self, x: &DMatrix<f64>, rows: &[usize]) -> Vec<u32> {
        let scores = design(x, rows, &self.standardizer) * &self.weights;
        scores
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for c in 1..r.len() {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Accuracy and macro-F1 over the classes present in truth or prediction.
pub fn classification_metrics(truth: &[u32], pred: &[u32]) -> (f64, f64) {
    let n = truth.len().max(1) as f64;
    let acc = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / n;
    let mut classes: Vec<u32> = truth.iter().chain(pred).cloned().collect();
    classes.sort_unstable();
    classes.dedup();
    let f1s: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let tp = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|(&t, &p)| t != c && p == c).count() as f64;
            let fneg = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p != c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fneg)
            }
        })
        .collect();
    let f1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
    (acc, f1)
}

/// Train on a seeded 80/20 split and report held-out metrics.
pub fn train_probe(
    features: &DMatrix<f64>,
    labels: &[u32],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Probe, ProbeMetrics)> {
    if labels.len() != features.nrows() {
        return Err(MsmaError::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            features.nrows()
        )));
    }
    let (train, test) = split(features.nrows(), cfg.test_frac, cfg.seed);
    let (probe, loss_trace) = fit_probe(features, labels, &train, n_classes, cfg)?;
    let pred = probe.predict(features, &test);
    let truth: Vec<u32> = test.iter().map(|&i| labels[i]).collect();
    let (accuracy, macro_f1) = classification_metrics(&truth, &pred);
    Ok((
        probe,
        ProbeMetrics {
            accuracy,
            macro_f1,
            loss_trace,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub tasks: Vec<String>,
    pub task_weights: Vec<f64>,
    pub n_layers: usize,
    /// `[task][layer]`, averaged over split seeds.
    pub accuracy: Vec<Vec<f64>>,
    pub macro_f1: Vec<Vec<f64>>,
    /// `[task][ℓ]` = `accuracy[ℓ+1] − accuracy[ℓ]`, length `L − 1`.
    pub gradient: Vec<Vec<f64>>,
    /// `[split][task][layer]` accuracies before averaging.
    pub split_accuracy: Vec<Vec<Vec<f64>>>,
    /// Seed of each split.
    pub split_seeds: Vec<u64>,
}

/// Uniform weight per scale group, shared evenly among the group's tasks.
pub fn default_task_weights(scales: &[Scale]) -> Vec<f64> {
    let groups: Vec<Scale> = Scale::ALL.iter().cloned().filter(|s| scales.contains(s)).collect();
    scales
        .iter()
        .map(|s| {
            let members = scales.iter().filter(|t| *t == s).count() as f64;
            1.0 / (groups.len() as f64 * members)
        })
        .collect()
}

impl ProbeResult {
    /// `Σ_t w_t |∇P_ℓᵗ|` per boundary position, optionally from one split only.
    pub fn weighted_gradient_magnitude(&self, split: Option<usize>) -> Vec<f64> {
        let acc = match split {
            Some(s) => &self.split_accuracy[s],
            None => &self.accuracy,
        };
        (0..self.n_layers.saturating_sub(1))
            .map(|l| {
                acc.iter()
                    .zip(&self.task_weights)
                    .map(|(a, w)| w * (a[l + 1] - a[l]).abs())
                    .sum()
            })
            .collect()
    }

    /// 1-based layer of best mean accuracy for `task` (lowest layer on ties).
    pub fn peak_layer(&self, task: &str) -> Option<usize> {
        let t = self.tasks.iter().position(|x| x == task)?;
        let mut best = 0;
        for (l, &v) in self.accuracy[t].iter().enumerate() {
            if v > self.accuracy[t][best] {
                best = l;
            }
        }
        Some(best + 1)
    }

    /// Long-format CSV: `layer,task,acc,f1,grad` (grad empty on the last layer).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,task,acc,f1,grad\n");
        for l in 0..self.n_layers {
            for (t, name) in self.tasks.iter().enumerate() {
                let grad = self.gradient[t].get(l).map(|g| format!("{g:.6}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{name},{:.6},{:.6},{grad}\n",
                    l + 1,
                    self.accuracy[t][l],
                    self.macro_f1[t][l]
                ));
            }
        }
        out
    }

    /// Task × layer accuracy matrix for heatmaps.
    pub fn heatmap_csv(&self) -> String {
        let mut out = String::from("task");
        for l in 1..=self.n_layers {
            out.push_str(&format!(",{l}"));
        }
        out.push('\n');
        for (t, name) in self.tasks.iter().enumerate() {
            out.push_str(name);
            for v in &self.accuracy[t] {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Probe every layer for each task (all manifest tasks when `tasks` is empty).
pub fn probe_stack(stack: &LayerStack, tasks: &[String], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let names: Vec<String> = if tasks.is_empty() {
        stack.manifest.tasks.iter().map(|t| t.name.clone()).collect()
    } else {
        tasks.to_vec()
    };
    if names.is_empty() {
        return Err(MsmaError::Precondition("no probing tasks".into()));
    }
    let mut specs = Vec::new();
    for name in &names {
        let spec = stack
            .task(name)
            .ok_or_else(|| MsmaError::validation("tasks", format!("missing task column `{name}`")))?
            .clone();
        let labels = &stack
            .label(name)
            .ok_or_else(|| MsmaError::validation("tasks", format!("missing task column `{name}`")))?
            .values;
        if labels.iter().all(|&c| c == labels[0]) {
            return Err(MsmaError::Precondition(format!("degenerate task `{name}`: a single label value")));
        }
        specs.push((spec, labels.to_vec()));
    }
    let layers = stack.layer_matrices()?;
    let n_layers = layers.len();
    let split_seeds: Vec<u64> = (0..cfg.seeds.max(1) as u64).map(|s| derive_seed(cfg.seed, s)).collect();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = split_seeds
        .iter()
        .map(|&s| split(stack.n_samples(), cfg.test_frac, s))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..splits.len())
        .flat_map(|s| (0..n_layers).map(move |l| (s, l)))
        .collect();
    let results: Vec<Result<Vec<(f64, f64)>>> = jobs
        .par_iter()
        .map(|&(s, l)| {
            let (train, test) = &splits[s];
            let sets: Vec<(&[u32], usize)> = specs.iter().map(|(sp, y)| (y.as_slice(), sp.n_classes)).collect();
            let probes = fit_probes(&layers[l], &sets, train, cfg)?;
            Ok(probes
                .iter()
                .zip(&specs)
                .map(|((probe, _), (_, labels))| {
                    let pred = probe.predict(&layers[l], test);
                    let truth: Vec<u32> = test.iter().map(|&i| labels[i]).collect();
                    classification_metrics(&truth, &pred)
                })
                .collect())
        })
        .collect();

    let mut split_accuracy = vec![vec![vec![0.0; n_layers]; names.len()]; splits.len()];
    let mut split_f1 = split_accuracy.clone();
    for (&(s, l), r) in jobs.iter().zip(results) {
        for (t, (acc, f1)) in r?.into_iter().enumerate() {
            split_accuracy[s][t][l] = acc;
            split_f1[s][t][l] = f1;
        }
    }
    let average = |per: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
        (0..names.len())
            .map(|t| {
                (0..n_layers)
                    .map(|l| per.iter().map(|sa| sa[t][l]).sum::<f64>() / per.len() as f64)
                    .collect()
            })
            .collect()
    };
    let accuracy = average(&split_accuracy);
    let macro_f1 = average(&split_f1);
    let gradient = accuracy
        .iter()
        .map(|a| a.windows(2).map(|w| w[1] - w[0]).collect())
        .collect();
    let scales: Vec<Scale> = specs.iter().map(|(s, _)| s.scale).collect();
    Ok(ProbeResult {
        task_weights: default_task_weights(&scales),
        tasks: names,
        n_layers,
        accuracy,
        macro_f1,
        gradient,
        split_accuracy,
        split_seeds,
    })
}
