//! CCE least squares for a fixed threshold value and its sandwich variances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::{regime_split, Direction, Projector};

/// Which meat matrix the sandwich variance uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VcovKind {
    /// Heteroskedasticity-robust, `diag(e e')` meat.
    #[default]
    Hc,
    /// Bartlett-kernel HAC; `None` uses `floor(T^{1/4})`.
    Hac { bandwidth: Option<usize> },
}

/// Per-unit estimation result at one threshold value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFit {
    pub gamma: f64,
    /// `(beta', delta')'`, length K + r.
    pub theta: DVector<f64>,
    pub k: usize,
    pub rss: f64,
    pub residuals: DVector<f64>,
    /// Asymptotic variance `V`; squared standard errors are `diag(V) / T`.
    pub vcov: DMatrix<f64>,
    pub vcov_kind: VcovKind,
    /// `RSS / T`.
    pub sigma2_eps: f64,
    pub n_obs: usize,
    /// Periods where the indicator fires.
    pub n_firing: usize,
}

impl UnitFit {
    pub fn beta(&self) -> DVector<f64> {
        self.theta.rows(0, self.k).into_owned()
    }
    pub fn delta(&self) -> DVector<f64> {
        self.theta.rows(self.k, self.theta.len() - self.k).into_owned()
    }
    pub fn r(&self) -> usize {
        self.theta.len() - self.k
    }
    pub fn std_errors(&self) -> DVector<f64> {
        let t = self.n_obs as f64;
        self.vcov.diagonal().map(|v| (v.max(0.0) / t).sqrt())
    }
}

/// Smallest number of observations each regime must hold before a fit is attempted.
pub fn min_regime_count(k: usize, r: usize) -> usize {
    k + r + 1
}

/// Default Bartlett bandwidth, the largest `b` with `b^4 <= T`.
pub fn default_bandwidth(t: usize) -> usize {
    let mut b = 0usize;
    while (b + 1).pow(4) <= t {
        b += 1;
    }
    b
}

/// Projected design `Z~ = M [X, W(gamma)]` and outcome `y~ = M y`.
pub fn transformed_design(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    q_i: &DVector<f64>,
    gamma: f64,
    proj: &Projector,
    selection: &[bool],
    direction: Direction,
) -> (DMatrix<f64>, DVector<f64>, usize) {
    let rm = regime_split(x_i, q_i, gamma, selection, direction);
    let firing = rm.count_firing();
    (proj.apply(&rm.z), proj.apply_vec(y_i), firing)
}

/// CCE estimate of `theta` for unit data at a known threshold.
#[allow(clippy::too_many_arguments)]
pub fn cce_fit_given_gamma(
    x_i: &DMatrix<f64>,
    y_i: &DVector<f64>,
    q_i: &DVector<f64>,
    gamma: f64,
    proj: &Projector,
    selection: &[bool],
    direction: Direction,
    vcov_kind: VcovKind,
) -> Result<UnitFit> {
    let t = x_i.nrows();
    let k = x_i.ncols();
    let r = selection.iter().filter(|s| **s).count();
    if y_i.len() != t || q_i.len() != t || proj.n_rows() != t {
        return Err(Error::InvalidConfig("unit data and projector disagree on T".into()));
    }
    if !gamma.is_finite() {
        return Err(Error::InvalidConfig("gamma must be finite".into()));
    }
    let (z, yt, firing) = transformed_design(x_i, y_i, q_i, gamma, proj, selection, direction);
    let need = min_regime_count(k, r);
    if firing < need || t - firing < need {
        return Err(Error::Identification {
            gamma,
            reason: format!("regime sizes ({firing}, {}) below the minimum {need}", t - firing),
        });
    }
    let (theta, residuals) = linalg::lstsq(&z, &yt).map_err(|e| Error::Identification {
        gamma,
        reason: e.to_string(),
    })?;
    let rss = residuals.norm_squared();
    let vcov = match vcov_kind {
        VcovKind::Hc => variance_hc(&residuals, &z)?,
        VcovKind::Hac { bandwidth } => variance_hac(&residuals, &z, bandwidth)?,
    };
    Ok(UnitFit {
        gamma,
        theta,
        k,
        rss,
        sigma2_eps: rss / t as f64,
        residuals,
        vcov,
        vcov_kind,
        n_obs: t,
        n_firing: firing,
    })
}

fn sandwich(z: &DMatrix<f64>, meat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = z.nrows() as f64;
    let sigma = z.transpose() * z / t;
    let sigma_inv = linalg::inv_gram(&sigma)?;
    let v = &sigma_inv * meat * &sigma_inv;
    Ok((&v + v.transpose()) * 0.5)
}

/// Lag-`j` meat term `T^{-1} sum_{t>j} e_t e_{t-j} z_t z_{t-j}'`.
fn meat_lag(residuals: &DVector<f64>, z: &DMatrix<f64>, lag: usize) -> DMatrix<f64> {
    let (t, p) = z.shape();
    let mut s = DMatrix::zeros(p, p);
    for s_t in lag..t {
        let w = residuals[s_t] * residuals[s_t - lag];
        if w == 0.0 {
            continue;
        }
        for a in 0..p {
            let za = z[(s_t, a)] * w;
            for b in 0..p {
                s[(a, b)] += za * z[(s_t - lag, b)];
            }
        }
    }
    s / t as f64
}

/// Heteroskedasticity-robust sandwich `Sigma^{-1} S Sigma^{-1}` with `Sigma = Z'Z / T`.
pub fn variance_hc(residuals: &DVector<f64>, z_tilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if residuals.len() != z_tilde.nrows() {
        return Err(Error::InvalidConfig("residual length differs from design rows".into()));
    }
    sandwich(z_tilde, &meat_lag(residuals, z_tilde, 0))
}

/// Newey-West sandwich with weights `K(j/b) = 1 - j/b` (zero for `j >= b`).
pub fn variance_hac(
    residuals: &DVector<f64>,
    z_tilde: &DMatrix<f64>,
    bandwidth: Option<usize>,
) -> Result<DMatrix<f64>> {
    let t = z_tilde.nrows();
    if residuals.len() != t {
        return Err(Error::InvalidConfig("residual length differs from design rows".into()));
    }
    let b = bandwidth.unwrap_or_else(|| default_bandwidth(t));
    if b == 0 || b >= t {
        return Err(Error::Bandwidth { bandwidth: b, periods: t });
    }
    let mut meat = meat_lag(residuals, z_tilde, 0);
    for j in 1..b {
        let w = 1.0 - j as f64 / b as f64;
        let sj = meat_lag(residuals, z_tilde, j);
        meat += (&sj + sj.transpose()) * w;
    }
    sandwich(z_tilde, &meat)
}
