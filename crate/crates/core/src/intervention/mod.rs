//! Representation-space interventions, text metrics over generations, and
//! the paired nonparametric statistics used to judge their effects.

mod effect;
pub mod stats;
pub mod text;

pub use effect::{
    paired_from_text_metrics, read_paired_csv, run_effect_study, EffectConfig, EffectReport, MetricEffect,
    PairedMetric,
};
pub use stats::{bh_fdr, bootstrap_ci, cliffs_delta, wilcoxon_signed_rank, Wilcoxon};
pub use text::{read_depth_annotations, text_metrics, Lexicon, TextMetrics};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::scale_ranges;
use crate::error::{MsmaError, Result};
use crate::estimators::Pca;
use crate::numeric::{derive_seed, rng};
use crate::repr_store::{AttentionMode, LayerStack, Scale, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InterventionKind {
    /// `h' = h + Δ`
    Translate { delta: Vec<f64> },
    /// `h' = α·h`
    Scale { alpha: f64 },
    /// `h' = h + N(0, σ²I)`
    Noise { sigma: f64 },
    /// Row-wise temperature on log-attention.
    Attention { tau: f64 },
}

impl InterventionKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InterventionKind::Translate { ref delta } if delta.iter().any(|v| !v.is_finite()) => {
                Err(MsmaError::validation("delta", "must be finite"))
            }
            InterventionKind::Scale { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(MsmaError::validation("alpha", "must be > 0"))
            }
            InterventionKind::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(MsmaError::validation("sigma", "must be ≥ 0"))
            }
            InterventionKind::Attention { tau } if !(tau > 0.0 && tau.is_finite()) => {
                Err(MsmaError::validation("tau", "must be > 0"))
            }
            _ => Ok(()),
        }
    }

    /// Parameters under which the operator leaves its input untouched.
    pub fn is_identity(&self) -> bool {
        match *self {
            InterventionKind::Translate { ref delta } => delta.iter().all(|&v| v == 0.0),
            InterventionKind::Scale { alpha } => alpha == 1.0,
            InterventionKind::Noise { sigma } => sigma == 0.0,
            InterventionKind::Attention { tau } => tau == 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InterventionKind::Translate { .. } => "translate",
            InterventionKind::Scale { .. } => "scale",
            InterventionKind::Noise { .. } => "noise",
            InterventionKind::Attention { .. } => "attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub scale: Scale,
    pub kind: InterventionKind,
}

/// Apply a hidden-state intervention to `[n × d]` representations. Noise
/// draws come from `seed`.
pub fn apply_to_hidden(h: &DMatrix<f64>, kind: &InterventionKind, seed: u64) -> Result<DMatrix<f64>> {
    kind.validate()?;
    if kind.is_identity() {
        return Ok(h.clone());
    }
    match kind {
        InterventionKind::Translate { delta } => {
            if delta.len() != h.ncols() {
                return Err(MsmaError::DimensionMismatch(format!(
                    "Δ has {} entries, representations have width {}",
                    delta.len(),
                    h.ncols()
                )));
            }
            let mut out = h.clone();
            for mut row in out.row_iter_mut() {
                for (v, d) in row.iter_mut().zip(delta) {
                    *v += d;
                }
            }
            Ok(out)
        }
        InterventionKind::Scale { alpha } => Ok(h * *alpha),
        InterventionKind::Noise { sigma } => {
            let normal = Normal::new(0.0, *sigma).map_err(|e| MsmaError::validation("sigma", e.to_string()))?;
            let mut r = rng(seed);
            // row-major draw order so a sample's noise does not depend on n
            let mut out = h.clone();
            for i in 0..h.nrows() {
                for j in 0..h.ncols() {
                    out[(i, j)] += normal.sample(&mut r);
                }
            }
            Ok(out)
        }
        InterventionKind::Attention { .. } => Err(MsmaError::validation(
            "kind",
            "attention temperature applies to attention maps, not hidden states",
        )),
    }
}

/// Temperature `τ` on log-attention, row by row: `a' ∝ a^(1/τ)`. Rows are
/// `n` long; zero entries stay zero.
pub fn apply_attention_temperature(a: &[f32], n: usize, tau: f64) -> Result<Vec<f32>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(MsmaError::validation("tau", "must be > 0"));
    }
    if n == 0 || a.len() % n != 0 {
        return Err(MsmaError::DimensionMismatch(format!("{} entries do not split into rows of {n}", a.len())));
    }
    if tau == 1.0 {
        return Ok(a.to_vec());
    }
    let inv = 1.0 / tau;
    let mut out = Vec::with_capacity(a.len());
    let mut logs = vec![0.0f64; n];
    for row in a.chunks_exact(n) {
        let mut max = f64::NEG_INFINITY;
        for (l, &v) in logs.iter_mut().zip(row) {
            *l = if v > 0.0 { (v as f64).ln() * inv } else { f64::NEG_INFINITY };
            max = max.max(*l);
        }
        if max == f64::NEG_INFINITY {
            return Err(MsmaError::Precondition("attention row has no positive entry".into()));
        }
        let mut sum = 0.0;
        for l in logs.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        out.extend(logs.iter().map(|&w| (w / sum) as f32));
    }
    Ok(out)
}

/// Unit vector along the top principal component of the pooled scale
/// representation, scaled to `magnitude`. The sign makes the largest
/// component positive.
pub fn default_direction(stack: &LayerStack, boundaries: (usize, usize), scale: Scale, magnitude: f64) -> Result<Vec<f64>> {
    let scales = crate::alignment::pool_scales(stack, boundaries)?;
    let pca = Pca::fit(scales.get(scale), 1)?;
    let mut v: DVector<f64> = pca.basis.column(0).into_owned();
    let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v = -v;
    }
    Ok(v.iter().map(|x| x * magnitude / v.norm()).collect())
}

/// 1-based layers the intervention touches.
pub fn target_layers(n_layers: usize, boundaries: (usize, usize), scale: Scale) -> Result<(usize, usize)> {
    let r = scale_ranges(n_layers, boundaries)?;
    Ok(match scale {
        Scale::Local => r[0],
        Scale::Intermediate => r[1],
        Scale::Global => r[2],
    })
}

/// Copy of `stack` with the intervention applied to every layer of the
/// targeted scale. Each layer's noise uses a seed derived from `seed` and
/// the layer index.
pub fn apply_intervention(
    stack: &LayerStack,
    boundaries: (usize, usize),
    spec: &InterventionSpec,
    seed: u64,
) -> Result<LayerStack> {
    spec.kind.validate()?;
    let (a, b) = target_layers(stack.n_layers(), boundaries, spec.scale)?;
    let mut out = stack.clone();
    if spec.kind.is_identity() {
        return Ok(out);
    }
    match &spec.kind {
        InterventionKind::Attention { tau } => {
            let att = out.attention.as_mut().filter(|_| stack.manifest.attention_mode != AttentionMode::None);
            let att = att.ok_or_else(|| MsmaError::Precondition("stack has no attention to intervene on".into()))?;
            let n = stack.manifest.seq_len;
            for t in &mut att[a - 1..b] {
                t.data = apply_attention_temperature(&t.data, n, *tau)?;
            }
        }
        kind => {
            for l in a..=b {
                let h = stack.layer_matrix(l)?;
                let moved = apply_to_hidden(&h, kind, derive_seed(seed, l as u64))?;
                out.hidden[l - 1] = Tensor::from_matrix(&moved);
            }
        }
    }
    out.validate()?;
    Ok(out)
}
