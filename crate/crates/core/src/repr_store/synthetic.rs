//! Synthetic layer stacks with planted three-regime structure.
//!
//! Each sample is a "document" of `seq_len` tokens split into 8-token
//! sentences. Three latent blocks are simulated per document:
//!
//! * token block: pooled token-class embeddings (local task = dominant token class),
//! * sentence block: sentence-pooled mixtures of token features plus
//!   sentence-type embeddings (intermediate task = dominant sentence type),
//! * topic block: a document-topic vector broadcast to every token (global task).
//!
//! Layer `ℓ` carries all three blocks, but the block matching its regime has
//! unit gain while the other two are attenuated by `cross_scale_gain`. Each
//! regime has its own rotation, norm and offset; layers inside a regime drift
//! slowly. Attention is banded and row-stochastic with a per-layer bandwidth
//! solved so the mean span hits `span_profile`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::stack::{AttentionMode, LabelColumn, LayerStack, Manifest, Scale, TaskSpec};
use super::tensor_file::Tensor;
use crate::attention_profile::banded_span;
use crate::error::{MsmaError, Result};
use crate::numeric::{self, rng};

/// Tokens per synthetic sentence.
pub const SENTENCE_LEN: usize = 8;

pub const LOCAL_TASK: &str = "token_class";
pub const INTERMEDIATE_TASK: &str = "sentence_type";
pub const GLOBAL_TASK: &str = "topic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_samples: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    /// `(l1, l2)`: layers `1..=l1` local, `l1+1..=l2` intermediate, rest global.
    pub boundaries: (usize, usize),
    /// Target mean attention span per layer (tokens).
    pub span_profile: Vec<f64>,
    pub noise_sigma: f64,
    /// Gain of the latent blocks that do not belong to a layer's regime.
    pub cross_scale_gain: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Spec with the default span profile and regime parameters.
    pub fn new(n_layers: usize, boundaries: (usize, usize), seed: u64) -> Self {
        SyntheticSpec {
            n_layers,
            hidden_dim: 16,
            n_samples: 256,
            seq_len: 128,
            n_heads: 4,
            boundaries,
            span_profile: default_span_profile(n_layers, boundaries),
            noise_sigma: 0.02,
            cross_scale_gain: 0.12,
            seed,
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.n_samples = n;
        self
    }

    pub fn with_hidden_dim(mut self, d: usize) -> Self {
        self.hidden_dim = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (l1, l2) = self.boundaries;
        if !(1 <= l1 && l1 < l2 && l2 <= self.n_layers) {
            return Err(MsmaError::validation(
                "boundaries",
                format!("need 1 ≤ l1 < l2 ≤ L, got ({l1}, {l2}) with L = {}", self.n_layers),
            ));
        }
        if self.hidden_dim < 3 {
            return Err(MsmaError::validation("hidden_dim", "must be ≥ 3"));
        }
        if self.n_samples < 2 {
            return Err(MsmaError::validation("n_samples", "must be ≥ 2"));
        }
        if self.seq_len < SENTENCE_LEN {
            return Err(MsmaError::validation(
                "seq_len",
                format!("must be ≥ {SENTENCE_LEN} (one sentence)"),
            ));
        }
        if self.n_heads == 0 {
            return Err(MsmaError::validation("n_heads", "must be ≥ 1"));
        }
        if self.span_profile.len() != self.n_layers {
            return Err(MsmaError::validation(
                "span_profile",
                format!("{} entries for {} layers", self.span_profile.len(), self.n_layers),
            ));
        }
        if self.span_profile.windows(2).any(|w| w[1] < w[0]) {
            return Err(MsmaError::validation("span_profile", "must be nondecreasing"));
        }
        if self.span_profile.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(MsmaError::validation("span_profile", "entries must be finite and ≥ 0"));
        }
        let max = max_banded_span(self.seq_len);
        if let Some(bad) = self.span_profile.iter().find(|&&s| s > max) {
            return Err(MsmaError::validation(
                "span_profile",
                format!(
                    "infeasible span {bad} for seq_len {}: banded attention reaches at most {max:.3} (max |i-j| = {})",
                    self.seq_len,
                    self.seq_len - 1
                ),
            ));
        }
        if self.noise_sigma < 0.0 || self.cross_scale_gain < 0.0 {
            return Err(MsmaError::validation("noise_sigma", "must be ≥ 0"));
        }
        Ok(())
    }

    pub fn regime(&self, layer: usize) -> Scale {
        let (l1, l2) = self.boundaries;
        if layer <= l1 {
            Scale::Local
        } else if layer <= l2 {
            Scale::Intermediate
        } else {
            Scale::Global
        }
    }
}

/// Span profile shaped like the GPT-2 measurements: ~12.5 at the first
/// layer rising to 36.2 at the last, with steps at the two boundaries.
pub fn default_span_profile(n_layers: usize, (l1, l2): (usize, usize)) -> Vec<f64> {
    let ramp = |lo: f64, hi: f64, k: usize, count: usize| {
        if count <= 1 {
            lo
        } else {
            lo + (hi - lo) * k as f64 / (count - 1) as f64
        }
    };
    let l2 = l2.min(n_layers);
    let l1 = l1.min(l2);
    (1..=n_layers)
        .map(|layer| {
            if layer <= l1 {
                ramp(12.5, 13.5, layer - 1, l1)
            } else if layer <= l2 {
                ramp(19.0, 26.0, layer - l1 - 1, l2 - l1)
            } else {
                ramp(33.0, 36.2, layer - l2 - 1, n_layers - l2)
            }
        })
        .collect()
}

/// Largest mean span a banded attention pattern can reach (uniform rows).
pub fn max_banded_span(seq: usize) -> f64 {
    let n = seq as f64;
    (n * n - 1.0) / (3.0 * n)
}

/// Banded row weights for half-width `b` (fractional part weights the next
/// diagonal). Rows are normalized to sum to 1.
pub fn banded_attention(seq: usize, b: f64) -> Vec<f64> {
    let full = b.floor() as usize;
    let frac = b - full as f64;
    let mut a = vec![0.0; seq * seq];
    for i in 0..seq {
        let row = &mut a[i * seq..(i + 1) * seq];
        let mut sum = 0.0;
        for (j, w) in row.iter_mut().enumerate() {
            let dist = i.abs_diff(j);
            *w = if dist <= full {
                1.0
            } else if dist == full + 1 {
                frac
            } else {
                0.0
            };
            sum += *w;
        }
        row.iter_mut().for_each(|w| *w /= sum);
    }
    a
}

/// Half-width whose banded pattern has mean span `target` (bisection).
pub fn solve_bandwidth(seq: usize, target: f64) -> Result<f64> {
    let max = max_banded_span(seq);
    if target > max + 1e-12 {
        return Err(MsmaError::validation(
            "span_profile",
            format!("infeasible span {target} for seq_len {seq} (max {max:.3})"),
        ));
    }
    let (mut lo, mut hi) = (0.0f64, (seq - 1) as f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if banded_span(seq, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

struct Latents {
    blocks: [DMatrix<f64>; 3],
    labels: [Vec<u32>; 3],
}

fn block_sizes(d: usize) -> [usize; 3] {
    let base = d / 3;
    let rem = d % 3;
    [base + usize::from(rem > 0), base + usize::from(rem > 1), base]
}

fn unit_rows<R: Rng>(rng: &mut R, k: usize, r: usize, norm: f64) -> DMatrix<f64> {
    let mut m = numeric::normal_matrix(rng, k, r);
    for mut row in m.row_iter_mut() {
        let n = row.norm().max(1e-12);
        row.scale_mut(norm / n);
    }
    m
}

fn dominant_draw<R: Rng>(rng: &mut R, dominant: usize, k: usize) -> usize {
    if rng.random::<f64>() < 0.5 {
        dominant
    } else {
        let other = rng.random_range(0..k - 1);
        if other >= dominant {
            other + 1
        } else {
            other
        }
    }
}

fn simulate_latents<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Latents {
    const K_TOKEN: usize = 3;
    const K_SENT: usize = 3;
    const K_TOPIC: usize = 4;
    let [r_loc, r_mid, r_glob] = block_sizes(spec.hidden_dim);
    let n = spec.n_samples;
    let n_sent = spec.seq_len / SENTENCE_LEN;

    let token_emb = unit_rows(rng, K_TOKEN, r_loc, 4.0);
    let sent_emb = unit_rows(rng, K_SENT, r_mid, 4.0);
    let topic_emb = unit_rows(rng, K_TOPIC, r_glob, 2.0);
    let mix = numeric::normal_matrix(rng, r_loc, r_mid) * (0.3 / (r_loc as f64).sqrt());

    let mut local = DMatrix::zeros(n, r_loc);
    let mut mid = DMatrix::zeros(n, r_mid);
    let mut glob = DMatrix::zeros(n, r_glob);
    let mut labels = [vec![0u32; n], vec![0u32; n], vec![0u32; n]];

    for s in 0..n {
        let c_tok = rng.random_range(0..K_TOKEN);
        let c_sent = rng.random_range(0..K_SENT);
        let c_topic = rng.random_range(0..K_TOPIC);
        labels[0][s] = c_tok as u32;
        labels[1][s] = c_sent as u32;
        labels[2][s] = c_topic as u32;

        // token features, then sentence pooling
        let mut doc_tokens = DVector::<f64>::zeros(r_loc);
        let mut doc_sentences = DVector::<f64>::zeros(r_mid);
        for _ in 0..n_sent {
            let mut pooled = DVector::<f64>::zeros(r_loc);
            for _ in 0..SENTENCE_LEN {
                let class = dominant_draw(rng, c_tok, K_TOKEN);
                let noise = numeric::normal_vector(rng, r_loc) * 0.5;
                pooled += token_emb.row(class).transpose() + noise;
            }
            pooled /= SENTENCE_LEN as f64;
            let stype = dominant_draw(rng, c_sent, K_SENT);
            let sentence = mix.transpose() * &pooled + sent_emb.row(stype).transpose();
            doc_tokens += pooled;
            doc_sentences += sentence;
        }
        doc_tokens /= n_sent as f64;
        doc_sentences /= n_sent as f64;

        let style = |rng: &mut R, r: usize| numeric::normal_vector(rng, r) * 0.35;
        let u = doc_tokens + style(rng, r_loc);
        let v = doc_sentences + style(rng, r_mid);
        let g = topic_emb.row(c_topic).transpose() + style(rng, r_glob);
        local.row_mut(s).copy_from(&u.transpose());
        mid.row_mut(s).copy_from(&v.transpose());
        glob.row_mut(s).copy_from(&g.transpose());
    }

    Latents {
        blocks: [
            numeric::standardize(&local),
            numeric::standardize(&mid),
            numeric::standardize(&glob),
        ],
        labels,
    }
}

fn small_rotation<R: Rng>(rng: &mut R, d: usize, eps: f64) -> DMatrix<f64> {
    let m = DMatrix::identity(d, d) + numeric::normal_matrix(rng, d, d) * eps;
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Generate a stack for `spec`; deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LayerStack> {
    spec.validate()?;
    let mut rng = rng(spec.seed);
    let d = spec.hidden_dim;
    let n = spec.n_samples;
    let latents = simulate_latents(spec, &mut rng);
    let z = DMatrix::from_fn(n, d, {
        let sizes = block_sizes(d);
        move |i, j| {
            let (b, off) = if j < sizes[0] {
                (0, j)
            } else if j < sizes[0] + sizes[1] {
                (1, j - sizes[0])
            } else {
                (2, j - sizes[0] - sizes[1])
            };
            latents.blocks[b][(i, off)]
        }
    });
    let sizes = block_sizes(d);
    let block_of = |j: usize| {
        if j < sizes[0] {
            0
        } else if j < sizes[0] + sizes[1] {
            1
        } else {
            2
        }
    };

    let regime_norm = [1.0, 2.0, 4.0];
    let regime_rot: Vec<DMatrix<f64>> = (0..3).map(|_| numeric::random_rotation(&mut rng, d)).collect();
    let regime_offset: Vec<DVector<f64>> = (0..3)
        .map(|r| numeric::normal_vector(&mut rng, d) * (1.5 * regime_norm[r]))
        .collect();

    let mut hidden = Vec::with_capacity(spec.n_layers);
    let mut drift_rot: Option<(usize, DMatrix<f64>)> = None;
    for layer in 1..=spec.n_layers {
        let regime = spec.regime(layer) as usize;
        let start = match spec.regime(layer) {
            Scale::Local => 1,
            Scale::Intermediate => spec.boundaries.0 + 1,
            Scale::Global => spec.boundaries.1 + 1,
        };
        let rot = match &drift_rot {
            Some((r, q)) if *r == regime => q * small_rotation(&mut rng, d, 0.03),
            _ => regime_rot[regime].clone(),
        };
        drift_rot = Some((regime, rot.clone()));
        let norm = regime_norm[regime] * (1.0 + 0.03 * (layer - start) as f64);
        let gains = DVector::from_fn(d, |j, _| {
            if block_of(j) == regime {
                1.0
            } else {
                spec.cross_scale_gain
            }
        });
        let mut h = DMatrix::from_fn(n, d, |i, j| z[(i, j)] * gains[j]) * &rot * norm;
        for i in 0..n {
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                h[(i, j)] += regime_offset[regime][j] + spec.noise_sigma * norm * eps;
            }
        }
        hidden.push(Tensor::from_matrix(&h));
    }

    let mut attention = Vec::with_capacity(spec.n_layers);
    let seq = spec.seq_len;
    let max = max_banded_span(seq);
    for &target in &spec.span_profile {
        let h = spec.n_heads;
        // heads spread symmetrically around the target so the head mean is exact
        let spread = if target > 0.0 { 0.15f64.min(max / target - 1.0).max(0.0) } else { 0.0 };
        let mut data = Vec::with_capacity(h * seq * seq);
        for head in 0..h {
            let delta = if h == 1 {
                0.0
            } else {
                spread * (2.0 * head as f64 / (h - 1) as f64 - 1.0)
            };
            let b = solve_bandwidth(seq, target * (1.0 + delta))?;
            data.extend(banded_attention(seq, b).into_iter().map(|v| v as f32));
        }
        attention.push(Tensor::new(vec![h, seq, seq], data)?);
    }

    let tasks = vec![
        TaskSpec {
            name: LOCAL_TASK.into(),
            n_classes: 3,
            scale: Scale::Local,
        },
        TaskSpec {
            name: INTERMEDIATE_TASK.into(),
            n_classes: 3,
            scale: Scale::Intermediate,
        },
        TaskSpec {
            name: GLOBAL_TASK.into(),
            n_classes: 4,
            scale: Scale::Global,
        },
    ];
    let [l0, l1, l2] = latents.labels;
    let labels = vec![
        LabelColumn {
            task: LOCAL_TASK.into(),
            values: l0,
        },
        LabelColumn {
            task: INTERMEDIATE_TASK.into(),
            values: l1,
        },
        LabelColumn {
            task: GLOBAL_TASK.into(),
            values: l2,
        },
    ];
    let manifest = Manifest {
        model: "synthetic".into(),
        n_layers: spec.n_layers,
        hidden_dim: d,
        n_heads: spec.n_heads,
        seq_len: seq,
        n_samples: n,
        tasks,
        attention_mode: AttentionMode::Averaged,
        provenance: Some(serde_json::to_value(spec)?),
    };
    let stack = LayerStack {
        manifest,
        hidden,
        attention: Some(attention),
        labels,
    };
    stack.validate()?;
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention_profile::{mean_span, AttentionView};

    #[test]
    fn seeded_determinism() {
        let spec = SyntheticSpec::new(12, (2, 8), 7).with_samples(64);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn spans_match_profile_within_five_percent() {
        let spec = SyntheticSpec::new(12, (2, 8), 3).with_samples(32);
        assert_eq!(spec.span_profile[0], 12.5);
        assert!((spec.span_profile[11] - 36.2).abs() < 1e-12);
        let stack = generate_synthetic(&spec).unwrap();
        for (t, target) in stack.attention.as_ref().unwrap().iter().zip(&spec.span_profile) {
            let s = mean_span(&AttentionView::from_tensor(t).unwrap()).unwrap();
            assert!((s - target).abs() <= 0.05 * target, "{s} vs {target}");
        }
    }

    #[test]
    fn infeasible_span_is_rejected() {
        let mut spec = SyntheticSpec::new(4, (1, 3), 1);
        spec.seq_len = 64;
        spec.span_profile = vec![10.0, 20.0, 30.0, 200.0];
        let err = generate_synthetic(&spec).unwrap_err();
        assert!(err.to_string().contains("infeasible span"), "{err}");
        assert!(err.to_string().contains("63"), "{err}");
    }

    #[test]
    fn attention_rows_stochastic_to_1e6() {
        let spec = SyntheticSpec::new(5, (1, 3), 11).with_samples(8);
        let stack = generate_synthetic(&spec).unwrap();
        for t in stack.attention.unwrap() {
            for row in t.data.chunks_exact(spec.seq_len) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_boundaries_rejected() {
        let mut spec = SyntheticSpec::new(6, (3, 3), 1);
        assert!(spec.validate().is_err());
        spec.boundaries = (0, 2);
        assert!(spec.validate().is_err());
        spec.boundaries = (2, 7);
        assert!(spec.validate().is_err());
    }
}
