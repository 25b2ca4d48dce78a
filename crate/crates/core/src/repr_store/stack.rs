use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::tensor_file::Tensor;
use crate::error::{MsmaError, Result};

/// Row-stochasticity tolerance for stored attention.
pub const ATTENTION_ROW_TOL: f64 = 1e-5;

/// Which semantic scale a probing task targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Local,
    Intermediate,
    Global,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Local, Scale::Intermediate, Scale::Global];

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Local => "local",
            Scale::Intermediate => "intermediate",
            Scale::Global => "global",
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = MsmaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Scale::Local),
            "intermediate" | "mid" => Ok(Scale::Intermediate),
            "global" => Ok(Scale::Global),
            other => Err(MsmaError::validation("scale", format!("unknown scale {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: usize,
    pub scale: Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// One `[heads × seq × seq]` tensor per layer, averaged over samples.
    Averaged,
    /// One `[samples × heads × seq × seq]` tensor per layer.
    PerSample,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: String,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    pub attention_mode: AttentionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelColumn {
    pub task: String,
    pub values: Vec<u32>,
}

/// The full per-layer dump of a corpus.
///
/// `hidden[i]` is the `[n_samples × hidden_dim]` matrix of file layer `i`;
/// analysis code numbers layers from 1, so `hidden[i]` is layer `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub manifest: Manifest,
    pub hidden: Vec<Tensor>,
    pub attention: Option<Vec<Tensor>>,
    pub labels: Vec<LabelColumn>,
}

impl LayerStack {
    pub fn n_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn n_samples(&self) -> usize {
        self.manifest.n_samples
    }

    /// Hidden states of 1-based layer `layer` as f64.
    pub fn layer_matrix(&self, layer: usize) -> Result<DMatrix<f64>> {
        if layer == 0 || layer > self.n_layers() {
            return Err(MsmaError::Precondition(format!(
                "layer {layer} outside 1..={}",
                self.n_layers()
            )));
        }
        self.hidden[layer - 1].to_matrix()
    }

    pub fn layer_matrices(&self) -> Result<Vec<DMatrix<f64>>> {
        self.hidden.iter().map(Tensor::to_matrix).collect()
    }

    pub fn label(&self, task: &str) -> Option<&LabelColumn> {
        self.labels.iter().find(|c| c.task == task)
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.manifest.tasks.iter().find(|t| t.name == name)
    }

    /// Keep only the listed samples (in order). Per-sample attention is
    /// subset too; averaged attention is shared.
    pub fn subset(&self, rows: &[usize]) -> Result<LayerStack> {
        let n = self.n_samples();
        if rows.iter().any(|&r| r >= n) {
            return Err(MsmaError::Precondition("subset row out of range".into()));
        }
        let hidden = self
            .hidden
            .iter()
            .map(|t| {
                let d = t.shape[1];
                let mut data = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    data.extend_from_slice(&t.data[r * d..(r + 1) * d]);
                }
                Tensor {
                    shape: vec![rows.len(), d],
                    data,
                }
            })
            .collect();
        let attention = match (&self.attention, self.manifest.attention_mode) {
            (Some(att), AttentionMode::PerSample) => Some(
                att.iter()
                    .map(|t| {
                        let per = t.numel() / t.shape[0];
                        let mut data = Vec::with_capacity(rows.len() * per);
                        for &r in rows {
                            data.extend_from_slice(&t.data[r * per..(r + 1) * per]);
                        }
                        let mut shape = t.shape.clone();
                        shape[0] = rows.len();
                        Tensor { shape, data }
                    })
                    .collect(),
            ),
            (att, _) => att.clone(),
        };
        let labels = self
            .labels
            .iter()
            .map(|c| LabelColumn {
                task: c.task.clone(),
                values: rows.iter().map(|&r| c.values[r]).collect(),
            })
            .collect();
        let mut manifest = self.manifest.clone();
        manifest.n_samples = rows.len();
        Ok(LayerStack {
            manifest,
            hidden,
            attention,
            labels,
        })
    }

    /// Check every stack invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.n_layers == 0 {
            return Err(MsmaError::validation("n_layers", "must be ≥ 1"));
        }
        if self.hidden.len() != m.n_layers {
            return Err(MsmaError::validation(
                "n_layers",
                format!(
                    "manifest declares {} layers but {} layer tensors are present",
                    m.n_layers,
                    self.hidden.len()
                ),
            ));
        }
        for (i, t) in self.hidden.iter().enumerate() {
            let field = format!("layer_{i}");
            t.validate(&field)?;
            if t.shape != [m.n_samples, m.hidden_dim] {
                return Err(MsmaError::validation(
                    field,
                    format!(
                        "shape {:?} does not match [n_samples={}, hidden_dim={}]",
                        t.shape, m.n_samples, m.hidden_dim
                    ),
                ));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(MsmaError::validation(field, "non-finite hidden state"));
            }
        }
        match (&self.attention, m.attention_mode) {
            (None, AttentionMode::None) => {}
            (None, _) => {
                return Err(MsmaError::validation(
                    "attention_mode",
                    "manifest declares attention but none is present",
                ))
            }
            (Some(_), AttentionMode::None) => {
                return Err(MsmaError::validation(
                    "attention_mode",
                    "attention present but manifest declares none",
                ))
            }
            (Some(att), mode) => {
                if att.len() != m.n_layers {
                    return Err(MsmaError::validation(
                        "attention",
                        format!("{} attention tensors for {} layers", att.len(), m.n_layers),
                    ));
                }
                let expect: Vec<usize> = match mode {
                    AttentionMode::Averaged => vec![m.n_heads, m.seq_len, m.seq_len],
                    _ => vec![m.n_samples, m.n_heads, m.seq_len, m.seq_len],
                };
                for (i, t) in att.iter().enumerate() {
                    let field = format!("attn_{i}");
                    t.validate(&field)?;
                    if t.shape != expect {
                        return Err(MsmaError::validation(
                            field,
                            format!("shape {:?}, expected {:?}", t.shape, expect),
                        ));
                    }
                    check_row_stochastic(&t.data, m.seq_len, ATTENTION_ROW_TOL)
                        .map_err(|msg| MsmaError::validation(field, msg))?;
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for task in &m.tasks {
            if !seen.insert(task.name.as_str()) {
                return Err(MsmaError::validation("tasks", format!("duplicate task {:?}", task.name)));
            }
            let col = self.label(&task.name).ok_or_else(|| {
                MsmaError::validation("labels", format!("missing label column {:?}", task.name))
            })?;
            if col.values.len() != m.n_samples {
                return Err(MsmaError::validation(
                    "labels",
                    format!("column {:?} has {} rows", task.name, col.values.len()),
                ));
            }
            if let Some(&bad) = col.values.iter().find(|&&v| v as usize >= task.n_classes) {
                return Err(MsmaError::validation(
                    "labels",
                    format!(
                        "column {:?} has label {bad} but manifest declares {} classes",
                        task.name, task.n_classes
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Every length-`n` row must be nonnegative and sum to 1 within `tol`.
pub fn check_row_stochastic(data: &[f32], n: usize, tol: f64) -> std::result::Result<(), String> {
    for (r, row) in data.chunks_exact(n).enumerate() {
        let mut sum = 0.0f64;
        for &v in row {
            if v < 0.0 || !v.is_finite() {
                return Err(format!("attention not row-stochastic: row {r} has entry {v}"));
            }
            sum += v as f64;
        }
        if (sum - 1.0).abs() > tol {
            return Err(format!("attention not row-stochastic: row {r} sums to {sum:.6}"));
        }
    }
    Ok(())
}

pub fn layer_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("layer_{i}.msma"))
}

pub fn attention_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("attn_{i}.msma"))
}

/// Write `stack` into `dir`; returns the manifest path.
pub fn write_stack(stack: &LayerStack, dir: &Path) -> Result<PathBuf> {
    stack.validate()?;
    fs::create_dir_all(dir).map_err(|e| MsmaError::io(dir, e))?;
    for (i, t) in stack.hidden.iter().enumerate() {
        t.write(&layer_path(dir, i))?;
    }
    if let Some(att) = &stack.attention {
        for (i, t) in att.iter().enumerate() {
            t.write(&attention_path(dir, i))?;
        }
    }
    if !stack.manifest.tasks.is_empty() {
        let path = dir.join("labels.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["sample_id".to_string()];
        header.extend(stack.manifest.tasks.iter().map(|t| t.name.clone()));
        w.write_record(&header)?;
        for s in 0..stack.n_samples() {
            let mut rec = vec![s.to_string()];
            for t in &stack.manifest.tasks {
                rec.push(stack.label(&t.name).expect("validated").values[s].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| MsmaError::io(&path, e))?;
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&stack.manifest)?;
    fs::write(&manifest_path, json + "\n").map_err(|e| MsmaError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| MsmaError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| MsmaError::validation("manifest", e.to_string()))
}

/// Load and validate a stack directory.
pub fn read_stack(dir: &Path) -> Result<LayerStack> {
    let manifest = read_manifest(dir)?;
    let mut hidden = Vec::with_capacity(manifest.n_layers);
    for i in 0..manifest.n_layers {
        let path = layer_path(dir, i);
        if !path.exists() {
            return Err(MsmaError::validation(
                "n_layers",
                format!(
                    "manifest declares {} layers but {} is missing",
                    manifest.n_layers,
                    path.display()
                ),
            ));
        }
        hidden.push(Tensor::read(&path)?);
    }
    let attention = if manifest.attention_mode == AttentionMode::None {
        None
    } else {
        let mut att = Vec::with_capacity(manifest.n_layers);
        for i in 0..manifest.n_layers {
            att.push(Tensor::read(&attention_path(dir, i))?);
        }
        Some(att)
    };
    let labels = if manifest.tasks.is_empty() {
        Vec::new()
    } else {
        read_labels(&dir.join("labels.csv"))?
    };
    let stack = LayerStack {
        manifest,
        hidden,
        attention,
        labels,
    };
    stack.validate()?;
    Ok(stack)
}

fn read_labels(path: &Path) -> Result<Vec<LabelColumn>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| MsmaError::validation("labels", format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    if headers.get(0) != Some("sample_id") {
        return Err(MsmaError::validation("labels", "first column must be sample_id"));
    }
    let mut cols: Vec<LabelColumn> = headers
        .iter()
        .skip(1)
        .map(|h| LabelColumn {
            task: h.to_string(),
            values: Vec::new(),
        })
        .collect();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let id: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| MsmaError::validation("labels", format!("bad sample_id on row {row}")))?;
        if id != row {
            return Err(MsmaError::validation(
                "labels",
                format!("sample_id {id} out of order on row {row}"),
            ));
        }
        for (j, col) in cols.iter_mut().enumerate() {
            let v = rec
                .get(j + 1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| {
                    MsmaError::validation("labels", format!("bad value in {:?} row {row}", col.task))
                })?;
            col.values.push(v);
        }
    }
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_stack() -> LayerStack {
        let hidden = vec![
            Tensor::new(vec![3, 4], (0..12).map(|v| v as f32 * 0.5).collect()).unwrap(),
            Tensor::new(vec![3, 4], (0..12).map(|v| -(v as f32) / 3.0).collect()).unwrap(),
        ];
        let eye = |n: usize| {
            let mut d = vec![0.0f32; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            d
        };
        let attention = Some(vec![
            Tensor::new(vec![1, 2, 2], eye(2)).unwrap(),
            Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap(),
        ]);
        LayerStack {
            manifest: Manifest {
                model: "tiny".into(),
                n_layers: 2,
                hidden_dim: 4,
                n_heads: 1,
                seq_len: 2,
                n_samples: 3,
                tasks: vec![TaskSpec {
                    name: "topic".into(),
                    n_classes: 2,
                    scale: Scale::Global,
                }],
                attention_mode: AttentionMode::Averaged,
                provenance: None,
            },
            hidden,
            attention,
            labels: vec![LabelColumn {
                task: "topic".into(),
                values: vec![0, 1, 1],
            }],
        }
    }

    #[test]
    fn two_layer_stack_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny_stack();
        let manifest = write_stack(&s, dir.path()).unwrap();
        assert!(manifest.ends_with("manifest.json"));
        assert_eq!(read_stack(dir.path()).unwrap(), s);
    }

    #[test]
    fn missing_layer_file_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny_stack();
        write_stack(&s, dir.path()).unwrap();
        s.manifest.n_layers = 3;
        fs::write(
            dir.path().join("manifest.json"),
            serde_json::to_string(&s.manifest).unwrap(),
        )
        .unwrap();
        let err = read_stack(dir.path()).unwrap_err();
        assert!(matches!(&err, MsmaError::Validation { field, .. } if field == "n_layers"), "{err}");
    }

    #[test]
    fn non_stochastic_attention_is_rejected() {
        let mut s = tiny_stack();
        s.attention.as_mut().unwrap()[1].data = vec![0.4, 0.4, 0.5, 0.5];
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("attention not row-stochastic"), "{err}");
    }

    #[test]
    fn label_cardinality_checked() {
        let mut s = tiny_stack();
        s.labels[0].values[2] = 5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn subset_keeps_rows() {
        let s = tiny_stack();
        let sub = s.subset(&[2, 0]).unwrap();
        assert_eq!(sub.n_samples(), 2);
        assert_eq!(sub.hidden[0].data[..4], s.hidden[0].data[8..12]);
        assert_eq!(sub.labels[0].values, vec![1, 0]);
        sub.validate().unwrap();
    }
}
