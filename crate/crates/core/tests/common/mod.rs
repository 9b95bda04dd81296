//! Independent reference computations for the integration tests.
//!
//! Everything here is written with dense matrices and explicit loops, without
//! calling into the library's numerical routines.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// `I - A (A'A)^{-1} A'` with a plain inverse; `A` must have full column rank.
pub fn dense_annihilator(a: &DMatrix<f64>) -> DMatrix<f64> {
    let t = a.nrows();
    if a.ncols() == 0 {
        return DMatrix::identity(t, t);
    }
    let g = (a.transpose() * a).try_inverse().expect("full column rank basis");
    DMatrix::identity(t, t) - a * g * a.transpose()
}

/// Column means over units, computed with a double loop.
pub fn column_mean_oracle(xs: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (t, k) = xs[0].shape();
    let mut out = DMatrix::zeros(t, k);
    for s in 0..t {
        for j in 0..k {
            let mut acc = 0.0;
            for x in xs {
                acc += x[(s, j)];
            }
            out[(s, j)] = acc / xs.len() as f64;
        }
    }
    out
}

/// RSS of OLS of `M y` on `M [X, W 1{q <= g}]` (or `>=`), `None` when a regime has fewer than `need` rows.
#[allow(clippy::too_many_arguments)]
pub fn naive_rss(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    q: &DVector<f64>,
    gamma: f64,
    m: &DMatrix<f64>,
    selection: &[bool],
    leq: bool,
    need: usize,
) -> Option<f64> {
    let t = x.nrows();
    let k = x.ncols();
    let sel: Vec<usize> = (0..k).filter(|j| selection[*j]).collect();
    let mut z = DMatrix::zeros(t, k + sel.len());
    let mut firing = 0;
    for s in 0..t {
        let on = if leq { q[s] <= gamma } else { q[s] >= gamma };
        firing += on as usize;
        for j in 0..k {
            z[(s, j)] = x[(s, j)];
        }
        for (c, j) in sel.iter().enumerate() {
            z[(s, k + c)] = if on { x[(s, *j)] } else { 0.0 };
        }
    }
    if firing < need || t - firing < need {
        return None;
    }
    let zt = m * z;
    let yt = m * y;
    let inv = (zt.transpose() * &zt).try_inverse()?;
    let theta = inv * zt.transpose() * &yt;
    Some((yt - zt * theta).norm_squared())
}

/// Distinct sorted values.
pub fn distinct(q: &[f64]) -> Vec<f64> {
    let mut v = q.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<f64> = Vec::new();
    for x in v {
        if out.last() != Some(&x) {
            out.push(x);
        }
    }
    out
}

/// Exhaustive search over every distinct value, then restricted to the
/// trimmed window `[floor(trim n), n - floor(trim n))`. Ties go to the smallest value.
#[allow(clippy::too_many_arguments)]
pub fn exhaustive_search(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    q: &DVector<f64>,
    m: &DMatrix<f64>,
    selection: &[bool],
    leq: bool,
    trim: f64,
    need: usize,
) -> Option<(f64, f64)> {
    let values = distinct(q.as_slice());
    let all: Vec<Option<f64>> = values.iter().map(|g| naive_rss(x, y, q, *g, m, selection, leq, need)).collect();
    let n = values.len();
    let cut = (trim * n as f64 + 1e-9).floor() as usize;
    let mut best: Option<(f64, f64)> = None;
    for j in cut..n - cut {
        if let Some(r) = all[j] {
            if best.is_none_or(|(_, b)| r < b) {
                best = Some((values[j], r));
            }
        }
    }
    best
}

/// Sample skewness and excess kurtosis (moment estimators).
pub fn skew_kurt(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = v.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

/// Median of a copy of `v`.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
