//! One-sided (Hestenes) Jacobi SVD for small dense matrices.
//!
//! The matrices here are at most a few hundred rows by ~128 columns, where
//! Jacobi's simplicity and high relative accuracy matter more than speed.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Rotations are skipped once `|wₚ·w_q| ≤ TOL·‖wₚ‖‖w_q‖`.
pub const ROTATION_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;
/// Columns with squared norm below this are zero to working precision; their
/// dot products are subnormal and cannot steer a rotation.
const NEGLIGIBLE: f64 = f64::MIN_POSITIVE / f64::EPSILON;

/// Thin SVD `A = U · diag(S) · Vᵀ` with `r = min(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `rows × r`, orthonormal columns.
    pub u: Tensor,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `cols × r`, orthonormal columns.
    pub v: Tensor,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.rows(), self.s.len());
        let n = self.v.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..r {
                let us = self.u.at(i, k) * self.s[k];
                if us == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += us * self.v.at(j, k);
                }
            }
        }
        Tensor::matrix(m, n, out).expect("shape by construction")
    }

    /// `Σ U_k V_kᵀ` over directions with `S_k > eps`: the minimum-norm
    /// subgradient of the nuclear norm.
    pub fn polar_factor(&self, eps: f64) -> Tensor {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut out = vec![0.0; m * n];
        for (k, &s) in self.s.iter().enumerate() {
            if s <= eps {
                continue;
            }
            for i in 0..m {
                let uik = self.u.at(i, k);
                for j in 0..n {
                    out[i * n + j] += uik * self.v.at(j, k);
                }
            }
        }
        Tensor::matrix(m, n, out).expect("shape by construction")
    }
}

pub fn svd(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = a.dims2()?;
    if !a.is_finite() {
        return Err(Error::Degenerate("svd input has non-finite entries".into()));
    }
    if m == 0 || n == 0 {
        return Ok(SvdResult {
            u: Tensor::zeros(&[m, 0]),
            s: Vec::new(),
            v: Tensor::zeros(&[n, 0]),
        });
    }
    if m >= n {
        let (u, s, v) = jacobi_tall(a.data(), m, n)?;
        Ok(finish(u, s, v, m, n))
    } else {
        // Aᵀ = U' S V'ᵀ  ⇒  A = V' S U'ᵀ
        let at = a.transpose()?;
        let (u_t, s, v_t) = jacobi_tall(at.data(), n, m)?;
        Ok(finish(v_t, s, u_t, m, n))
    }
}

/// Sum of singular values.
pub fn nuclear_norm(a: &Tensor) -> Result<f64> {
    Ok(svd(a)?.s.iter().sum())
}

type Columns = Vec<Vec<f64>>;

/// Returns left vectors (`n` columns of length `m`), singular values, and
/// right vectors (`n` columns of length `n`), sorted descending.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> Result<(Columns, Vec<f64>, Columns)> {
    let mut w: Columns = (0..n)
        .map(|j| (0..m).map(|i| a[i * n + j]).collect())
        .collect();
    let mut v: Columns = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha < NEGLIGIBLE || beta < NEGLIGIBLE || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / alpha.sqrt() / beta.sqrt();
                residual = f64::max(residual, off);
                if off <= ROTATION_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let sigma: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let floor = f64::MIN_POSITIVE.sqrt();
    let mut u_cols: Columns = Vec::with_capacity(n);
    let mut v_cols: Columns = Vec::with_capacity(n);
    let mut s_sorted = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sj = sigma[j];
        if sj > floor {
            u_cols.push(w[j].iter().map(|x| x / sj).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            missing.push(k);
        }
        v_cols.push(v[j].clone());
        s_sorted.push(sj);
    }
    complete_basis(&mut u_cols, &missing);
    Ok((u_cols, s_sorted, v_cols))
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to all
/// other columns, drawn from the standard basis by Gram-Schmidt.
fn complete_basis(cols: &mut Columns, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut candidate = 0;
    for &k in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes for stability.
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || (missing.contains(&j) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                cols[k] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

fn leading_sign(col: &[f64]) -> f64 {
    let scale = col.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    col.iter()
        .find(|x| x.abs() > 1e-12 * scale)
        .map_or(1.0, |x| x.signum())
}

/// Applies the sign convention (first nonzero entry of each `U` column is
/// positive) and packs the columns into matrices.
fn finish(mut u: Columns, s: Vec<f64>, mut v: Columns, m: usize, n: usize) -> SvdResult {
    let r = s.len();
    for k in 0..r {
        if leading_sign(&u[k]) < 0.0 {
            u[k].iter_mut().for_each(|x| *x = -*x);
            v[k].iter_mut().for_each(|x| *x = -*x);
        }
    }
    let to_matrix = |cols: &Columns, rows: usize| {
        let mut data = vec![0.0; rows * r];
        for (k, c) in cols.iter().enumerate() {
            for i in 0..rows {
                data[i * r + k] = c[i];
            }
        }
        Tensor::matrix(rows, r, data).expect("shape by construction")
    };
    SvdResult {
        u: to_matrix(&u, m),
        s,
        v: to_matrix(&v, n),
    }
}
