//! Boundary detection: fuse the attention-span, adjacent-MI and probe
//! evidence channels into a per-layer score and pick the two boundaries.
//!
//! Position `ℓ` (1-based, `1..L−1`) scores a boundary between layers `ℓ` and
//! `ℓ + 1`, so a detected `l1` is the last layer of the local regime.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention_profile::profile_stack;
use crate::error::{MsmaError, Result};
use crate::estimators::{representation_mi, DEFAULT_K};
use crate::numeric::{derive_seed, mean, select_rows, std_dev};
use crate::probing::{probe_stack, split, ProbeConfig, ProbeResult};
use crate::repr_store::LayerStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundaryConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Overrides the probe task weights when set.
    pub task_weights: Option<Vec<f64>>,
    pub window: usize,
    pub min_separation: usize,
    pub cv_folds: usize,
    pub ksg_k: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            alpha: 0.4,
            beta: 0.4,
            gamma: 0.2,
            task_weights: None,
            window: 3,
            min_separation: 2,
            cv_folds: 5,
            ksg_k: DEFAULT_K,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        let sum = self.alpha + self.beta + self.gamma;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MsmaError::validation("alpha", format!("α + β + γ = {sum}, expected 1")));
        }
        if [self.alpha, self.beta, self.gamma].iter().any(|w| *w < 0.0) {
            return Err(MsmaError::validation("alpha", "channel weights must be ≥ 0"));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(MsmaError::validation("window", format!("{} is not an odd count ≥ 1", self.window)));
        }
        if self.min_separation == 0 {
            return Err(MsmaError::validation("min_separation", "must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channels {
    /// `S_{ℓ+1} − S_ℓ`.
    pub delta_span: Vec<f64>,
    /// `I_{ℓ−1} − I_ℓ` (0 at the first position).
    pub delta_mi: Vec<f64>,
    /// `Σ_t w_t |∇P_ℓᵗ|`.
    pub probe_gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryResult {
    pub l1: usize,
    pub l2: usize,
    /// Smoothed fused score per position.
    pub scores: Vec<f64>,
    pub channels: Channels,
    /// `I(layer ℓ; layer ℓ+1)`.
    pub adjacent_mi: Vec<f64>,
    pub cv_boundaries: Vec<(usize, usize)>,
    pub cv_std: f64,
    pub stable: bool,
}

fn z_normalize(v: &[f64]) -> Vec<f64> {
    let m = mean(v);
    let s = std_dev(v);
    if !(s > 1e-12) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - m) / s).collect()
}

/// Centred triangular moving average; weights are renormalized at the edges.
pub fn smooth(v: &[f64], window: usize) -> Vec<f64> {
    let h = (window.max(1) - 1) / 2;
    (0..v.len())
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for o in -(h as isize)..=(h as isize) {
                let j = i as isize + o;
                if j < 0 || j >= v.len() as isize {
                    continue;
                }
                let w = (h + 1) as f64 - o.unsigned_abs() as f64;
                num += w * v[j as usize];
                den += w;
            }
            num / den
        })
        .collect()
}

/// `ΔI_ℓ = I_{ℓ−1} − I_ℓ`, with 0 at the first position.
pub fn delta_mi(adjacent: &[f64]) -> Vec<f64> {
    (0..adjacent.len())
        .map(|l| if l == 0 { 0.0 } else { adjacent[l - 1] - adjacent[l] })
        .collect()
}

/// Fused, smoothed score `α·z(ΔS) + β·z(ΔI) + γ·z(Σ w∇P)`.
pub fn boundary_scores(
    delta_span: &[f64],
    adjacent_mi: &[f64],
    probe_gradient: &[f64],
    cfg: &BoundaryConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = delta_span.len();
    if adjacent_mi.len() != n || probe_gradient.len() != n {
        return Err(MsmaError::DimensionMismatch(format!(
            "channel lengths {} / {} / {}",
            n,
            adjacent_mi.len(),
            probe_gradient.len()
        )));
    }
    let zs = z_normalize(delta_span);
    let zi = z_normalize(&delta_mi(adjacent_mi));
    let zp = z_normalize(probe_gradient);
    let raw: Vec<f64> = (0..n)
        .map(|l| cfg.alpha * zs[l] + cfg.beta * zi[l] + cfg.gamma * zp[l])
        .collect();
    Ok(smooth(&raw, cfg.window))
}

/// Two highest local peaks at least `min_sep` apart, falling back to the
/// global ordering. Returns 1-based positions with `l1 < l2`.
pub fn pick_boundaries(scores: &[f64], min_sep: usize) -> Result<(usize, usize)> {
    let n = scores.len();
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if n < 2 || !(hi - lo > 1e-12) {
        return Err(MsmaError::AmbiguousBoundaries { trace: scores.to_vec() });
    }
    let order = |idx: &mut Vec<usize>| {
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    };
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| (i == 0 || scores[i] > scores[i - 1]) && (i + 1 == n || scores[i] >= scores[i + 1]))
        .collect();
    order(&mut peaks);
    let mut all: Vec<usize> = (0..n).collect();
    order(&mut all);
    let first = peaks.first().copied().unwrap_or(all[0]);
    let second = peaks
        .iter()
        .chain(all.iter())
        .copied()
        .find(|&i| i.abs_diff(first) >= min_sep)
        .ok_or_else(|| MsmaError::AmbiguousBoundaries { trace: scores.to_vec() })?;
    let (a, b) = if first < second { (first, second) } else { (second, first) };
    Ok((a + 1, b + 1))
}

/// `I(layer ℓ; layer ℓ+1)` for `ℓ = 1..L−1`.
pub fn adjacent_mi_profile(layers: &[DMatrix<f64>], k: usize, seed: u64) -> Result<Vec<f64>> {
    if layers.len() < 2 {
        return Err(MsmaError::Precondition("adjacent MI needs ≥ 2 layers".into()));
    }
    (0..layers.len() - 1)
        .into_par_iter()
        .map(|l| Ok(representation_mi(&layers[l], &layers[l + 1], k, derive_seed(seed, l as u64))?.mi))
        .collect()
}

/// Symmetric `L × L` MI matrix (diagonal left at 0).
pub fn mi_matrix(layers: &[DMatrix<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = layers.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let values: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| Ok(representation_mi(&layers[i], &layers[j], k, derive_seed(seed, (i * n + j) as u64))?.mi))
        .collect();
    let mut m = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(values) {
        let v = v?;
        m[i][j] = v;
        m[j][i] = v;
    }
    Ok(m)
}

fn weighted_probe_channel(probe: &ProbeResult, weights: &Option<Vec<f64>>, split: Option<usize>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(probe.weighted_gradient_magnitude(split)),
        Some(w) => {
            if w.len() != probe.tasks.len() {
                return Err(MsmaError::validation(
                    "task_weights",
                    format!("{} weights for {} tasks", w.len(), probe.tasks.len()),
                ));
            }
            let mut p = probe.clone();
            p.task_weights = w.clone();
            Ok(p.weighted_gradient_magnitude(split))
        }
    }
}

pub fn detect_boundaries(stack: &LayerStack, cfg: &BoundaryConfig) -> Result<BoundaryResult> {
    cfg.validate()?;
    let n_layers = stack.n_layers();
    if n_layers < 4 {
        return Err(MsmaError::Precondition(format!("boundary detection needs L ≥ 4, got {n_layers}")));
    }
    let delta_span = match &stack.attention {
        Some(_) => profile_stack(stack)?.delta_span,
        None => {
            log::warn!("stack has no attention; the span channel is zero");
            vec![0.0; n_layers - 1]
        }
    };
    let layers = stack.layer_matrices()?;
    let mut probe_cfg = cfg.probe.clone();
    probe_cfg.seeds = probe_cfg.seeds.max(cfg.cv_folds);
    let probe = if cfg.gamma > 0.0 {
        Some(probe_stack(stack, &[], &probe_cfg)?)
    } else {
        None
    };
    let probe_channel = |split: Option<usize>| -> Result<Vec<f64>> {
        match &probe {
            Some(p) => weighted_probe_channel(p, &cfg.task_weights, split),
            None => Ok(vec![0.0; n_layers - 1]),
        }
    };

    let adjacent = adjacent_mi_profile(&layers, cfg.ksg_k, cfg.seed)?;
    let probe_gradient = probe_channel(None)?;
    let scores = boundary_scores(&delta_span, &adjacent, &probe_gradient, cfg)?;
    let (l1, l2) = pick_boundaries(&scores, cfg.min_separation)?;

    let mut cv_boundaries = Vec::with_capacity(cfg.cv_folds);
    for f in 0..cfg.cv_folds {
        let seed = derive_seed(probe_cfg.seed, f as u64);
        let (train, _) = split(stack.n_samples(), probe_cfg.test_frac, seed);
        let sub: Vec<DMatrix<f64>> = layers.iter().map(|m| select_rows(m, &train)).collect();
        let adj = adjacent_mi_profile(&sub, cfg.ksg_k, derive_seed(cfg.seed, 1000 + f as u64))?;
        let pg = probe_channel(Some(f))?;
        let s = boundary_scores(&delta_span, &adj, &pg, cfg)?;
        cv_boundaries.push(pick_boundaries(&s, cfg.min_separation)?);
    }
    let cv_std = if cv_boundaries.is_empty() {
        0.0
    } else {
        let a: Vec<f64> = cv_boundaries.iter().map(|b| b.0 as f64).collect();
        let b: Vec<f64> = cv_boundaries.iter().map(|b| b.1 as f64).collect();
        std_dev(&a).max(std_dev(&b))
    };
    Ok(BoundaryResult {
        l1,
        l2,
        scores,
        channels: Channels {
            delta_mi: delta_mi(&adjacent),
            delta_span,
            probe_gradient,
        },
        adjacent_mi: adjacent,
        cv_boundaries,
        cv_std,
        stable: cv_std < 0.5,
    })
}

impl BoundaryResult {
    /// `position,delta_span,delta_mi,probe_gradient,adjacent_mi,score`.
    pub fn traces_csv(&self) -> String {
        let mut out = String::from("position,delta_span,delta_mi,probe_gradient,adjacent_mi,score\n");
        for l in 0..self.scores.len() {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                l + 1,
                self.channels.delta_span[l],
                self.channels.delta_mi[l],
                self.channels.probe_gradient[l],
                self.adjacent_mi[l],
                self.scores[l]
            ));
        }
        out
    }
}
