//! One-sided (Hestenes) Jacobi SVD with a fixed cyclic sweep order.
//!
//! Output conventions:
//! - singular values sorted non-increasing, ties kept in original column order;
//! - the largest-magnitude entry of every left singular vector is non-negative
//!   (first such entry when several share the maximum);
//! - left vectors belonging to numerically zero singular values are completed
//!   to an orthonormal set from the standard basis, so `u` always has
//!   orthonormal columns.

use super::{dot, Matrix};
use crate::error::{GemsError, Result};

const MAX_SWEEPS: usize = 100;
/// Singular values below `NULL_RATIO * sigma_max` get completed left vectors.
const NULL_RATIO: f64 = 1e-12;

/// Thin SVD `a = u * diag(sigma) * vᵀ` with `p = min(m, n)` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let (m, p) = self.u.shape();
        let scaled = Matrix::from_fn(m, p, |i, j| self.u.get(i, j) * self.sigma[j]);
        scaled.matmul_t(&self.v).expect("conforming factors")
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    a.check_finite("svd input")?;
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(GemsError::InvalidArgument("svd of an empty matrix".into()));
    }
    if m >= n {
        let (u, sigma, v) = jacobi_tall(a);
        Ok(normalize_signs(u, sigma, v))
    } else {
        // a = (aᵀ)ᵀ = (u' Σ v'ᵀ)ᵀ = v' Σ u'ᵀ
        let (ut, sigma, vt) = jacobi_tall(&a.transpose());
        Ok(normalize_signs(vt, sigma, ut))
    }
}

/// Top-`r` left singular vectors of `a` as an `m x r` orthonormal basis.
pub fn truncated_basis(a: &Matrix, r: usize) -> Result<Matrix> {
    let max = a.rows().min(a.cols());
    if r == 0 || r > max {
        return Err(GemsError::RankOutOfRange { rank: r, max });
    }
    let s = svd(a)?;
    Ok(s.u.leading_columns(r))
}

/// Jacobi on a matrix with `rows >= cols`. Returns `(u, sigma, v)` sorted by
/// singular value but before sign normalization.
fn jacobi_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| a.column(c)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * (m as f64).max(1.0);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps original column order on ties
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let sigma_max = order.first().map_or(0.0, |&i| norms[i]);
    let threshold = sigma_max * NULL_RATIO;
    let mut ucols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > threshold && s > 0.0 {
            ucols.push(Some(cols[j].iter().map(|x| x / s).collect()));
        } else {
            ucols.push(None);
        }
        for i in 0..n {
            v.set(i, k, vcols[j][i]);
        }
    }
    let ucols = complete_basis(m, ucols);
    let u = Matrix::from_fn(m, n, |i, k| ucols[k][i]);
    (u, sigma, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills missing columns with standard basis vectors orthogonalized against
/// every column already present; picks the candidate with the largest
/// residual (lowest index on ties).
fn complete_basis(m: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for e in 0..m {
                    let mut cand = vec![0.0; m];
                    cand[e] = 1.0;
                    for _ in 0..2 {
                        for d in &done {
                            let proj = dot(&cand, d);
                            cand.iter_mut().zip(d).for_each(|(x, y)| *x -= proj * y);
                        }
                    }
                    let norm = dot(&cand, &cand).sqrt();
                    if best.as_ref().map_or(true, |(b, _)| norm > *b + 1e-12) {
                        best = Some((norm, cand));
                    }
                }
                let (norm, mut cand) = best.expect("m > 0");
                cand.iter_mut().for_each(|x| *x /= norm);
                done.push(cand.clone());
                out.push(cand);
            }
        }
    }
    out
}

fn normalize_signs(mut u: Matrix, sigma: Vec<f64>, mut v: Matrix) -> SvdResult {
    for k in 0..u.cols() {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..u.rows() {
            let a = u.get(i, k).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.get(best, k) < 0.0 {
            for i in 0..u.rows() {
                u.set(i, k, -u.get(i, k));
            }
            for i in 0..v.rows() {
                v.set(i, k, -v.get(i, k));
            }
        }
    }
    SvdResult { u, sigma, v }
}
