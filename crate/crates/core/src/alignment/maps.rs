//! Cross-scale maps: least-squares linear, orthogonal Procrustes, and an
//! MLP with an affine skip path.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};
use crate::estimators::Pca;
use crate::nn::{add_row_bias, Activation, Mlp, Trace};
use crate::numeric::{center, check_finite, column_means};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Linear,
    Procrustes,
    Mlp,
}

/// `y = x·W + b`, with `W` stored `[d_in × d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearMap {
    /// Identity on the shared leading coordinates.
    pub fn identity(d_in: usize, d_out: usize) -> Self {
        LinearMap {
            w: DMatrix::identity(d_in, d_out),
            b: DVector::zeros(d_out),
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.w;
        add_row_bias(&mut y, &self.b);
        y
    }

    fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn params_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w.as_slice());
        out.extend_from_slice(self.b.as_slice());
    }

    fn set_params(&mut self, p: &[f64]) {
        let n = self.w.len();
        self.w.as_mut_slice().copy_from_slice(&p[..n]);
        let m = self.b.len();
        self.b.as_mut_slice().copy_from_slice(&p[n..n + m]);
    }

    fn grads_into(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>, out: &mut Vec<f64>) {
        let gw = x.tr_mul(dy);
        out.extend_from_slice(gw.as_slice());
        out.extend(dy.column_iter().map(|c| c.sum()));
    }
}

/// `y = s·P(x)·Q + b`, optionally wrapped in PCA projections when source
/// and target widths differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesMap {
    pub q: DMatrix<f64>,
    pub scale: f64,
    pub offset: DVector<f64>,
    pub src_pca: Option<Pca>,
    pub dst_pca: Option<Pca>,
}

impl ProcrustesMap {
    pub fn identity(d: usize) -> Self {
        ProcrustesMap {
            q: DMatrix::identity(d, d),
            scale: 1.0,
            offset: DVector::zeros(d),
            src_pca: None,
            dst_pca: None,
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let z = match &self.src_pca {
            Some(p) => p.transform(x),
            None => x.clone(),
        };
        let mut y = z * &self.q * self.scale;
        add_row_bias(&mut y, &self.offset);
        match &self.dst_pca {
            Some(p) => p.inverse_transform(&y),
            None => y,
        }
    }
}

/// `y = x·W + b + g(x)` where `g` is a one-hidden-layer tanh network whose
/// output layer starts at zero, so a fresh map equals its skip path.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpMap {
    pub skip: LinearMap,
    pub residual: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentMap {
    Linear(LinearMap),
    Procrustes(ProcrustesMap),
    Mlp(MlpMap),
}

/// Hidden width of the residual branch.
pub fn mlp_hidden_width(d: usize) -> usize {
    (4 * d).min(512)
}

/// Forward values kept for the parameter gradient.
pub enum MapTrace {
    Plain,
    Mlp(Trace),
}

impl AlignmentMap {
    /// Identity-initialized map of the given kind.
    pub fn identity<R: Rng + ?Sized>(kind: MapKind, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            MapKind::Linear => AlignmentMap::Linear(LinearMap::identity(d_in, d_out)),
            MapKind::Procrustes => {
                if d_in != d_out {
                    return Err(MsmaError::DimensionMismatch(format!(
                        "identity Procrustes map needs equal widths, got {d_in} and {d_out}"
                    )));
                }
                AlignmentMap::Procrustes(ProcrustesMap::identity(d_in))
            }
            MapKind::Mlp => AlignmentMap::Mlp(MlpMap::new(LinearMap::identity(d_in, d_out), rng)),
        })
    }

    pub fn kind(&self) -> MapKind {
        match self {
            AlignmentMap::Linear(_) => MapKind::Linear,
            AlignmentMap::Procrustes(_) => MapKind::Procrustes,
            AlignmentMap::Mlp(_) => MapKind::Mlp,
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x).0
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MapTrace) {
        match self {
            AlignmentMap::Linear(m) => (m.apply(x), MapTrace::Plain),
            AlignmentMap::Procrustes(m) => (m.apply(x), MapTrace::Plain),
            AlignmentMap::Mlp(m) => {
                let tr = m.residual.forward_trace(x);
                (m.skip.apply(x) + tr.output(), MapTrace::Mlp(tr))
            }
        }
    }

    /// Trainable parameter count. Procrustes maps are closed-form only.
    pub fn n_params(&self) -> usize {
        match self {
            AlignmentMap::Linear(m) => m.n_params(),
            AlignmentMap::Procrustes(_) => 0,
            AlignmentMap::Mlp(m) => m.skip.n_params() + m.residual.n_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        match self {
            AlignmentMap::Linear(m) => m.params_into(&mut p),
            AlignmentMap::Procrustes(_) => {}
            AlignmentMap::Mlp(m) => {
                m.skip.params_into(&mut p);
                p.extend(m.residual.params());
            }
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter length");
        match self {
            AlignmentMap::Linear(m) => m.set_params(p),
            AlignmentMap::Procrustes(_) => {}
            AlignmentMap::Mlp(m) => {
                let k = m.skip.n_params();
                m.skip.set_params(&p[..k]);
                m.residual.set_params(&p[k..]);
            }
        }
    }

    /// Parameter gradient given `dy = ∂loss/∂output` for inputs `x`.
    pub fn param_grads(&self, x: &DMatrix<f64>, trace: &MapTrace, dy: &DMatrix<f64>) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.n_params());
        match (self, trace) {
            (AlignmentMap::Linear(m), _) => m.grads_into(x, dy, &mut g),
            (AlignmentMap::Procrustes(_), _) => {}
            (AlignmentMap::Mlp(m), MapTrace::Mlp(tr)) => {
                m.skip.grads_into(x, dy, &mut g);
                g.extend(m.residual.backward(tr, dy).0);
            }
            (AlignmentMap::Mlp(_), MapTrace::Plain) => panic!("MLP gradient needs its forward trace"),
        }
        g
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

impl MlpMap {
    pub fn new<R: Rng + ?Sized>(skip: LinearMap, rng: &mut R) -> Self {
        let (d_in, d_out) = skip.w.shape();
        let mut residual = Mlp::new(&[d_in, mlp_hidden_width(d_in), d_out], Activation::Tanh, rng);
        residual.weights[1].fill(0.0);
        MlpMap { skip, residual }
    }
}

/// Ridge least squares with an unpenalized intercept:
/// `W = argmin ‖src·W + 1bᵀ − dst‖² + λ_r‖W‖²`.
pub fn fit_linear_map(src: &DMatrix<f64>, dst: &DMatrix<f64>, ridge: f64) -> Result<LinearMap> {
    if src.nrows() != dst.nrows() {
        return Err(MsmaError::DimensionMismatch(format!(
            "{} source rows vs {} target rows",
            src.nrows(),
            dst.nrows()
        )));
    }
    if ridge < 0.0 {
        return Err(MsmaError::validation("ridge", "must be ≥ 0"));
    }
    check_finite(src, "linear map source")?;
    check_finite(dst, "linear map target")?;
    let (xc, mx) = center(src);
    let (yc, my) = center(dst);
    let mut gram = xc.tr_mul(&xc);
    let d = gram.nrows();
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max().max(0.0);
    let min = eig.eigenvalues.min();
    if min <= 1e-12 * max.max(1e-300) {
        return Err(MsmaError::Numerical(format!(
            "singular normal equations (smallest eigenvalue {min:.3e}); add ridge"
        )));
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| MsmaError::Numerical("singular normal equations; add ridge".into()))?;
    let w = chol.solve(&xc.tr_mul(&yc));
    let b = &my - w.tr_mul(&mx);
    Ok(LinearMap { w, b })
}

/// Orthogonal Procrustes with isotropic scale and offset. Reflections are
/// allowed (full orthogonal group). Differing widths are first projected to
/// their common PCA dimension.
pub fn fit_procrustes(src: &DMatrix<f64>, dst: &DMatrix<f64>) -> Result<ProcrustesMap> {
    let n = src.nrows();
    if dst.nrows() != n {
        return Err(MsmaError::DimensionMismatch(format!("{n} source rows vs {} target rows", dst.nrows())));
    }
    if n < 2 {
        return Err(MsmaError::Precondition("Procrustes needs at least 2 rows".into()));
    }
    check_finite(src, "procrustes source")?;
    check_finite(dst, "procrustes target")?;
    let (src_pca, dst_pca, xs, ys) = if src.ncols() == dst.ncols() {
        (None, None, src.clone(), dst.clone())
    } else {
        let k = src.ncols().min(dst.ncols()).min(n - 1);
        let ps = Pca::fit(src, k)?;
        let pd = Pca::fit(dst, k)?;
        let (xs, ys) = (ps.transform(src), pd.transform(dst));
        (Some(ps), Some(pd), xs, ys)
    };
    let mx = column_means(&xs);
    let my = column_means(&ys);
    let (xc, _) = center(&xs);
    let (yc, _) = center(&ys);
    let m = xc.tr_mul(&yc);
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let sv = &svd.singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > 1e-10 * smax.max(1e-300)).count();
    if rank < sv.len() {
        warn!("rank-deficient cross-covariance in Procrustes fit ({rank} of {})", sv.len());
    }
    let q = u * vt;
    let denom = xc.norm_squared();
    let scale = if denom > 0.0 { sv.sum() / denom } else { 1.0 };
    let offset = my - q.tr_mul(&mx) * scale;
    Ok(ProcrustesMap {
        q,
        scale,
        offset,
        src_pca,
        dst_pca,
    })
}
