//! Finite-difference curvature proxy for a point cloud.
//!
//! For each point, its `k_nn` neighbors are expressed in a local PCA frame:
//! the top `D_LOCAL` directions are tangent coordinates `u`, the remaining
//! spanned directions normal coordinates `v`. Each normal coordinate is fit
//! as `v ≈ a₁u₁ + a₂u₂ + c₁₁u₁² + c₁₂u₁u₂ + c₂₂u₂²`; `K_i` is the norm of
//! all second-order coefficients and `ΔV_i = π r_k²` is the area of the
//! neighborhood disc. The penalty is `Σ_i K_i² ΔV_i`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MsmaError, Result};
use crate::numeric::check_finite;

pub const DEFAULT_K_NN: usize = 10;
/// Intrinsic dimension of the local quadratic fit.
pub const D_LOCAL: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    pub value: f64,
    pub k: Vec<f64>,
    pub dv: Vec<f64>,
}

/// Indices of the `k` nearest other points to `i` (ties toward lower index).
fn neighbors(x: &DMatrix<f64>, i: usize, k: usize, sq: &mut Vec<(f64, usize)>) -> Vec<usize> {
    let n = x.nrows();
    sq.clear();
    for j in 0..n {
        if j != i {
            let mut s = 0.0;
            for c in 0..x.ncols() {
                let t = x[(j, c)] - x[(i, c)];
                s += t * t;
            }
            sq.push((s, j));
        }
    }
    sq.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut nb: Vec<(f64, usize)> = sq[..k].to_vec();
    nb.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    nb.into_iter().map(|(_, j)| j).collect()
}

/// Pseudo-inverse with a relative singular-value cutoff.
fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let tol = 1e-10 * svd.singular_values.max();
    svd.pseudo_inverse(tol.max(1e-300)).expect("u and v_t computed")
}

struct Local {
    k2: f64,
    dv: f64,
    /// `∂(K²·ΔV)/∂offsets`, `k × d`, when requested.
    grad: Option<DMatrix<f64>>,
}

fn local_curvature(x: &DMatrix<f64>, i: usize, nb: &[usize], want_grad: bool) -> Result<Local> {
    let d = x.ncols();
    let k = nb.len();
    let off = DMatrix::from_fn(k, d, |a, c| x[(nb[a], c)] - x[(i, c)]);
    let (far, r2) = off
        .row_iter()
        .map(|r| r.norm_squared())
        .enumerate()
        .fold((0, 0.0), |acc, (a, v)| if v > acc.1 { (a, v) } else { acc });
    if r2 <= 0.0 {
        return Err(MsmaError::Precondition(format!("degenerate neighborhood at point {i}: zero spread")));
    }
    let dv = std::f64::consts::PI * r2;
    let mut centered = off.clone();
    let mean = off.row_mean();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let svd = centered.clone().svd(false, true);
    let vt = svd.v_t.expect("v_t");
    let sv = &svd.singular_values;
    let smax = sv.max();
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let rank = sv.iter().filter(|&&s| s > 1e-9 * smax).count();
    if rank <= D_LOCAL {
        return Ok(Local {
            k2: 0.0,
            dv,
            grad: want_grad.then(|| DMatrix::zeros(k, d)),
        });
    }
    let tangent = DMatrix::from_fn(d, D_LOCAL, |r, c| vt[(order[c], r)]);
    let normal = DMatrix::from_fn(d, rank - D_LOCAL, |r, c| vt[(order[D_LOCAL + c], r)]);
    let u = &off * &tangent;
    let v = &off * &normal;
    let phi = DMatrix::from_fn(k, 5, |a, c| {
        let (u1, u2) = (u[(a, 0)], u[(a, 1)]);
        match c {
            0 => u1,
            1 => u2,
            2 => u1 * u1,
            3 => u1 * u2,
            _ => u2 * u2,
        }
    });
    let beta = pinv(&phi) * &v;
    let coef = beta.rows(2, 3);
    let k2 = coef.norm_squared();
    let grad = want_grad.then(|| {
        // differentiate the least-squares solution through both Φ(u) and v
        let mut gb = DMatrix::zeros(5, v.ncols());
        gb.rows_mut(2, 3).copy_from(&(coef * 2.0));
        let h = pinv(&phi.tr_mul(&phi)) * gb;
        let resid = &v - &phi * &beta;
        let dphi = &resid * h.transpose() - &phi * &h * beta.transpose();
        let d_v = &phi * &h;
        let d_u = DMatrix::from_fn(k, D_LOCAL, |a, c| {
            let (u1, u2) = (u[(a, 0)], u[(a, 1)]);
            let r = dphi.row(a);
            if c == 0 {
                r[0] + 2.0 * u1 * r[2] + u2 * r[3]
            } else {
                r[1] + u1 * r[3] + 2.0 * u2 * r[4]
            }
        });
        let mut g = &d_u * tangent.transpose() + &d_v * normal.transpose();
        g += frame_grad(&centered, &vt, sv, &order[..rank], &off.tr_mul(&d_u), &off.tr_mul(&d_v));
        g *= dv;
        // ΔV = π·max‖offset‖²; K²ΔV is scale-free only with this term
        let mut row = g.row_mut(far);
        row += off.row(far) * (2.0 * std::f64::consts::PI * k2);
        g
    });
    Ok(Local { k2, dv, grad })
}

/// Gradient with respect to the offsets flowing through the PCA frame, given
/// `∂/∂tangent` (`d × 2`) and `∂/∂normal` (`d × (rank − 2)`). Uses first-order
/// eigenvector perturbation of `CᵀC`; rotations inside the normal block leave
/// the penalty unchanged and are skipped.
fn frame_grad(
    centered: &DMatrix<f64>,
    vt: &DMatrix<f64>,
    sv: &nalgebra::DVector<f64>,
    used: &[usize],
    g_t: &DMatrix<f64>,
    g_n: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (k, d) = centered.shape();
    let q = |i: usize| vt.row(i).transpose();
    let lam = |i: usize| sv[i] * sv[i];
    let mut out = DMatrix::zeros(k, d);
    for (a, &i) in used.iter().enumerate() {
        let gi = if a < D_LOCAL { g_t.column(a).into_owned() } else { g_n.column(a - D_LOCAL).into_owned() };
        let qi = q(i);
        let li = lam(i);
        // null-space part: (I − Q Qᵀ) g / λ_i
        let mut w = gi.clone();
        for &j in used {
            let qj = q(j);
            w -= &qj * qj.dot(&gi);
        }
        w /= li;
        for (b, &j) in used.iter().enumerate() {
            if j == i || (a >= D_LOCAL && b >= D_LOCAL) {
                continue;
            }
            let gap = li - lam(j);
            if gap.abs() > 1e-12 * li {
                let qj = q(j);
                w += &qj * (gi.dot(&qj) / gap);
            }
        }
        // dM = CᵀdC + dCᵀC, so ∂/∂C = C(W + Wᵀ) with W = w qᵢᵀ
        out += (centered * &w) * qi.transpose() + (centered * &qi) * w.transpose();
    }
    // C = off − mean(off)
    let mean = out.row_mean();
    for mut row in out.row_iter_mut() {
        row -= &mean;
    }
    out
}

fn check(points: &DMatrix<f64>, k_nn: usize) -> Result<()> {
    let n = points.nrows();
    if k_nn < D_LOCAL + 2 {
        return Err(MsmaError::validation("k_nn", format!("must be ≥ {}", D_LOCAL + 2)));
    }
    if n <= k_nn {
        return Err(MsmaError::Precondition(format!("curvature needs n > k_nn, got n = {n}, k_nn = {k_nn}")));
    }
    check_finite(points, "curvature points")
}

pub fn curvature_penalty(points: &DMatrix<f64>, k_nn: usize) -> Result<Curvature> {
    Ok(curvature_with_grad(points, k_nn, false)?.0)
}

/// Penalty and, when `want_grad`, its gradient with respect to the points.
/// Only the neighbor sets are held fixed; the fit is differentiated through
/// the tangent/normal frame, both coordinates and the disc area (farthest
/// neighbor).
pub fn curvature_with_grad(
    points: &DMatrix<f64>,
    k_nn: usize,
    want_grad: bool,
) -> Result<(Curvature, Option<DMatrix<f64>>)> {
    check(points, k_nn)?;
    let (n, d) = points.shape();
    let mut grad = want_grad.then(|| DMatrix::zeros(n, d));
    let mut ks = Vec::with_capacity(n);
    let mut dvs = Vec::with_capacity(n);
    let mut value = 0.0;
    let mut scratch = Vec::with_capacity(n);
    for i in 0..n {
        let nb = neighbors(points, i, k_nn, &mut scratch);
        let loc = local_curvature(points, i, &nb, want_grad)?;
        value += loc.k2 * loc.dv;
        ks.push(loc.k2.sqrt());
        dvs.push(loc.dv);
        if let (Some(g), Some(lg)) = (grad.as_mut(), loc.grad) {
            for (a, &j) in nb.iter().enumerate() {
                for c in 0..d {
                    let v = lg[(a, c)];
                    g[(j, c)] += v;
                    g[(i, c)] -= v;
                }
            }
        }
    }
    Ok((Curvature { value, k: ks, dv: dvs }, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{normal_matrix, random_orthogonal, rng};
    use rand::Rng;

    fn plane(n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        let q = random_orthogonal(&mut r, 5);
        let uv = DMatrix::from_fn(n, 5, |_, c| if c < 2 { r.random::<f64>() * 2.0 - 1.0 } else { 0.0 });
        uv * q
    }

    fn sphere(n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        let mut p = normal_matrix(&mut r, n, 3);
        for mut row in p.row_iter_mut() {
            let s = row.norm();
            row /= s;
        }
        p
    }

    #[test]
    fn plane_is_flat() {
        let c = curvature_penalty(&plane(200, 1), 10).unwrap();
        assert!(c.value <= 1e-6, "{}", c.value);
    }

    #[test]
    fn sphere_is_curved() {
        let flat = curvature_penalty(&plane(200, 2), 10).unwrap().value;
        let round = curvature_penalty(&sphere(200, 2), 10).unwrap().value;
        assert!(round > 10.0 * flat && round > 1e-3, "{round} vs {flat}");
    }

    #[test]
    fn line_is_flat() {
        let p = DMatrix::from_fn(30, 4, |i, c| (i as f64) * [1.0, -2.0, 0.5, 3.0][c]);
        assert_eq!(curvature_penalty(&p, 6).unwrap().value, 0.0);
    }

    #[test]
    fn repeated_point_neighborhood_errors() {
        let p = DMatrix::from_element(20, 3, 1.0);
        assert!(curvature_penalty(&p, 5).is_err());
        assert!(curvature_penalty(&sphere(5, 1), 5).is_err());
        assert!(curvature_penalty(&sphere(50, 1), 3).unwrap_err().is_validation());
    }

    #[test]
    fn gradient_matches_directional_differences() {
        let mut r = rng(3);
        let p = sphere(60, 3) + normal_matrix(&mut r, 60, 3) * 0.05;
        let (_, g) = curvature_with_grad(&p, 8, true).unwrap();
        let g = g.unwrap();
        let scale_dir = &p / p.norm();
        for t in 0..6 {
            let dir = if t == 0 { scale_dir.clone() } else { normal_matrix(&mut r, 60, 3) };
            let dir = &dir / dir.norm();
            let h = 1e-6;
            let up = curvature_penalty(&(&p + &dir * h), 8).unwrap().value;
            let dn = curvature_penalty(&(&p - &dir * h), 8).unwrap().value;
            let fd = (up - dn) / (2.0 * h);
            let an = g.dot(&dir);
            assert!((fd - an).abs() <= 1e-4 * (1.0 + fd.abs()), "direction {t}: {fd} vs {an}");
        }
    }

    #[test]
    fn penalty_is_scale_free() {
        let p = sphere(80, 4);
        let a = curvature_penalty(&p, 10).unwrap().value;
        let b = curvature_penalty(&(&p * 3.0), 10).unwrap().value;
        assert!((a - b).abs() <= 1e-8 * a);
    }
}
