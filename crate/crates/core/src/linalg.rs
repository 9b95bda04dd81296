//! Small dense linear-algebra helpers shared by the estimators.
//!
//! Everything here goes through the singular value decomposition so that the
//! rank decision is made against one relative tolerance, `RANK_TOL` times the
//! largest singular value.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance on singular values below which a direction is treated as null.
pub const RANK_TOL: f64 = 1e-10;

/// Condition-number ceiling for the small covariance matrices inverted in Wald forms.
pub const COND_LIMIT: f64 = 1e12;

/// Orthonormal basis (T x rank) of the column space of `a`.
pub fn orthonormal_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = a.shape();
    if cols == 0 || rows == 0 {
        return DMatrix::zeros(rows, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return DMatrix::zeros(rows, 0);
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > RANK_TOL * smax)
        .map(|(j, _)| j)
        .collect();
    u.select_columns(keep.iter())
}

/// Moore-Penrose pseudo-inverse of a symmetric positive semidefinite matrix.
pub fn pinv_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = a.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut out = DMatrix::zeros(n, n);
    if lmax == 0.0 {
        return out;
    }
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > RANK_TOL * RANK_TOL * lmax {
            let v = eig.eigenvectors.column(j);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

/// `(A'A)^+` computed from the singular values of `A`, so that the rank
/// decision is made on `A` rather than on its squared Gram matrix.
pub fn gram_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let p = a.ncols();
    if p == 0 || a.nrows() == 0 {
        return DMatrix::zeros(p, p);
    }
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    let mut out = DMatrix::zeros(p, p);
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s > RANK_TOL * smax {
            let v = vt.row(j).transpose();
            out += (&v * v.transpose()) / (s * s);
        }
    }
    out
}

/// Least-squares solution of `z * theta = y` with full column rank required.
///
/// Returns `(theta, residuals)`.
pub fn lstsq(z: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let (rows, cols) = z.shape();
    if cols == 0 {
        return Ok((DVector::zeros(0), y.clone()));
    }
    if rows < cols {
        return Err(Error::Singular(format!(
            "design has {cols} columns but {rows} rows"
        )));
    }
    let svd = z.clone().svd(true, true);
    let s = &svd.singular_values;
    let smax = s.max();
    let smin = s.min();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        return Err(Error::Singular(format!(
            "design rank deficient (singular values {smin:e} / {smax:e})"
        )));
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut uty = u.transpose() * y;
    for (c, sv) in uty.iter_mut().zip(s.iter()) {
        *c /= sv;
    }
    let theta = vt.transpose() * uty;
    let residuals = y - z * &theta;
    Ok((theta, residuals))
}

/// Inverse of a symmetric matrix, refusing matrices whose condition number exceeds `cond_limit`.
pub fn inv_sym_checked(a: &DMatrix<f64>, cond_limit: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    if n == 1 {
        let v = a[(0, 0)];
        return if v.is_finite() && v > 0.0 {
            Some(DMatrix::from_element(1, 1, 1.0 / v))
        } else {
            None
        };
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmax > 0.0) || !(lmin > 0.0) || lmax / lmin > cond_limit || !lmax.is_finite() {
        return None;
    }
    let mut out = DMatrix::zeros(n, n);
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(j);
        out += (v * v.transpose()) / l;
    }
    Some(out)
}

/// Inverse of `T^{-1} Z'Z`-type matrices with the SVD rank rule.
pub fn inv_gram(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    // Gram eigenvalues are squared singular values of the design.
    if !(lmax > 0.0) || lmin <= RANK_TOL * RANK_TOL * lmax {
        return Err(Error::Singular(format!(
            "moment matrix eigenvalues {lmin:e} / {lmax:e}"
        )));
    }
    let mut out = DMatrix::zeros(n, n);
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(j);
        out += (v * v.transpose()) / l;
    }
    Ok(out)
}

/// Solves the symmetric positive definite system `g x = b` by Cholesky,
/// rejecting near-collinear systems.
///
/// A pivot `L_jj^2` smaller than `1e-12 * g_jj` means column `j` is, up to a
/// relative angle of 1e-6, inside the span of the preceding columns.
pub fn spd_solve(g: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = g.nrows();
    let chol = g.clone().cholesky()?;
    let l = chol.l_dirty();
    for j in 0..n {
        let d = g[(j, j)];
        if !(d > 0.0) || l[(j, j)] * l[(j, j)] < 1e-12 * d {
            return None;
        }
    }
    Some(chol.solve(b))
}
