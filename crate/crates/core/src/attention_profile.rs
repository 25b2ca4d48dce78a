//! Per-layer attention span and entropy.
//!
//! Mean span is normalized per query position,
//! `S = (1 / (H·n)) Σ_h Σ_ij A_ij |i − j|`, so it stays in `[0, n − 1]`
//! regardless of sequence length.

use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};
use crate::numeric::spearman;
use crate::repr_store::{LayerStack, Tensor};

/// Rows must sum to 1 within this tolerance to be profiled.
pub const ROW_TOLERANCE: f64 = 1e-4;

/// A `[heads × n × n]` attention tensor in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionView {
    pub heads: usize,
    pub seq: usize,
    pub data: Vec<f64>,
}

impl AttentionView {
    pub fn new(heads: usize, seq: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * seq * seq || heads == 0 || seq == 0 {
            return Err(MsmaError::DimensionMismatch(format!(
                "attention data of length {} for {heads} heads × {seq}²",
                data.len()
            )));
        }
        Ok(AttentionView { heads, seq, data })
    }

    /// Accepts `[H, n, n]` or per-sample `[S, H, n, n]`; per-sample tensors
    /// are averaged over samples first.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape.as_slice() {
            &[h, n, m] if n == m => {
                Self::new(h, n, t.data.iter().map(|&v| v as f64).collect())
            }
            &[s, h, n, m] if n == m => {
                let per = h * n * n;
                let mut acc = vec![0.0f64; per];
                for sample in t.data.chunks_exact(per) {
                    for (a, &v) in acc.iter_mut().zip(sample) {
                        *a += v as f64;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= s as f64);
                Self::new(h, n, acc)
            }
            other => Err(MsmaError::DimensionMismatch(format!(
                "attention tensor must be [H,n,n] or [S,H,n,n], got {other:?}"
            ))),
        }
    }

    pub fn head(&self, h: usize) -> &[f64] {
        let sz = self.seq * self.seq;
        &self.data[h * sz..(h + 1) * sz]
    }

    fn check_rows(&self) -> Result<()> {
        for (r, row) in self.data.chunks_exact(self.seq).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(MsmaError::validation(
                    "attention",
                    format!("attention not row-stochastic: row {r} sums to {sum:.6}"),
                ));
            }
        }
        Ok(())
    }
}

fn head_span(a: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        for (j, &w) in row.iter().enumerate() {
            total += w * i.abs_diff(j) as f64;
        }
    }
    total / n as f64
}

/// Mean span of each head.
pub fn head_spans(a: &AttentionView) -> Result<Vec<f64>> {
    a.check_rows()?;
    Ok((0..a.heads).map(|h| head_span(a.head(h), a.seq)).collect())
}

pub fn mean_span(a: &AttentionView) -> Result<f64> {
    let spans = head_spans(a)?;
    Ok(spans.iter().sum::<f64>() / spans.len() as f64)
}

/// Mean over heads and rows of the row entropy in nats (`0·ln 0 = 0`).
pub fn attention_entropy(a: &AttentionView) -> Result<f64> {
    a.check_rows()?;
    let rows = a.heads * a.seq;
    let total: f64 = a
        .data
        .chunks_exact(a.seq)
        .map(|row| {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / rows as f64)
}

/// Mean span of the banded pattern with half-width `b`, without
/// materializing the matrix (see `repr_store::synthetic::banded_attention`).
pub fn banded_span(seq: usize, b: f64) -> f64 {
    let full = b.floor() as usize;
    let frac = b - full as f64;
    let mut total = 0.0;
    for i in 0..seq {
        let mut mass = 1.0;
        let mut moment = 0.0;
        for side in [i, seq - 1 - i] {
            let c = side.min(full) as f64;
            mass += c;
            moment += 0.5 * c * (c + 1.0);
            if side > full {
                mass += frac;
                moment += frac * (full + 1) as f64;
            }
        }
        total += moment / mass;
    }
    total / seq as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    /// Mean span per layer (1-based layer `i + 1` at index `i`).
    pub span: Vec<f64>,
    pub entropy: Vec<f64>,
    /// `span[ℓ+1] − span[ℓ]`, length `L − 1`.
    pub delta_span: Vec<f64>,
    /// `[layer][head]` spans, for heatmaps.
    pub head_spans: Vec<Vec<f64>>,
    /// Spearman correlation of span against depth.
    pub span_depth_spearman: f64,
}

pub fn profile_stack(stack: &LayerStack) -> Result<AttentionProfile> {
    let att = stack
        .attention
        .as_ref()
        .ok_or_else(|| MsmaError::Precondition("stack has no attention tensors".into()))?;
    let mut span = Vec::with_capacity(att.len());
    let mut entropy = Vec::with_capacity(att.len());
    let mut per_head = Vec::with_capacity(att.len());
    for t in att {
        let view = AttentionView::from_tensor(t)?;
        let hs = head_spans(&view)?;
        span.push(hs.iter().sum::<f64>() / hs.len() as f64);
        entropy.push(attention_entropy(&view)?);
        per_head.push(hs);
    }
    let delta_span = span.windows(2).map(|w| w[1] - w[0]).collect();
    let depth: Vec<f64> = (1..=span.len()).map(|l| l as f64).collect();
    Ok(AttentionProfile {
        span_depth_spearman: spearman(&span, &depth),
        span,
        entropy,
        delta_span,
        head_spans: per_head,
    })
}

impl AttentionProfile {
    /// CSV with columns `layer,span,entropy,delta_span` (empty delta on the last layer).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,span,entropy,delta_span\n");
        for (i, (s, h)) in self.span.iter().zip(&self.entropy).enumerate() {
            let delta = self
                .delta_span
                .get(i)
                .map(|d| format!("{d:.6}"))
                .unwrap_or_default();
            out.push_str(&format!("{},{s:.6},{h:.6},{delta}\n", i + 1));
        }
        out
    }
}
