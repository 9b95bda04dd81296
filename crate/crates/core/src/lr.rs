//! Likelihood-ratio statistics for the threshold and the confidence sets
//! obtained by inverting them.
//!
//! Under a shrinking threshold effect the LR statistic at the true threshold
//! converges to `eta^2 * Xi` with `P(Xi <= x) = (1 - exp(-x/2))^2`, which has
//! the closed-form quantile `c(a) = -2 ln(1 - sqrt(1 - a))`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cce::UnitFit;
use crate::error::{Error, Result};
use crate::panel::{selected_columns, Direction, Projector, UnitData};
use crate::threshold::{GammaGrid, PooledFit, RssProfile, ThresholdSearch};

const RSS_SLACK: f64 = 1e-10;

/// Distribution function `(1 - exp(-x/2))^2` of the limiting LR variable.
pub fn lr_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let e = -(-x / 2.0).exp_m1();
    e * e
}

/// Critical value `c(a) = -2 ln(1 - sqrt(1 - a))` for level `a` in (0, 1).
pub fn lr_critical_value(a: f64) -> Result<f64> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::InvalidLevel(a));
    }
    Ok(-2.0 * (-(1.0 - a).sqrt()).ln_1p())
}

/// `(RSS(gamma) - RSS(gamma_hat)) / sigma2`, clamped at zero within a small slack.
pub fn lr_statistic(rss_at_gamma: f64, rss_at_gamma_hat: f64, sigma2_eps: f64) -> Result<f64> {
    if !(sigma2_eps > 0.0) {
        return Err(Error::NonPositiveVariance(format!("error variance {sigma2_eps}")));
    }
    let diff = rss_at_gamma - rss_at_gamma_hat;
    if diff < -RSS_SLACK * rss_at_gamma_hat.abs().max(1.0) {
        return Err(Error::Inconsistent(format!(
            "RSS at candidate ({rss_at_gamma:e}) below RSS at the estimate ({rss_at_gamma_hat:e})"
        )));
    }
    Ok(diff.max(0.0) / sigma2_eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eta2Source {
    /// Homoskedastic value 1.
    Default,
    UserSupplied,
    /// Kernel plug-in estimate (an approximation, not an exact estimator).
    KernelPlugIn,
}

/// LR profile along a grid and the confidence set it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrProfile {
    pub grid: GammaGrid,
    /// `None` where the grid point was unidentified.
    pub lr_values: Vec<Option<f64>>,
    pub gamma_hat: f64,
    pub sigma2_eps: f64,
    pub eta2: f64,
    pub eta2_source: Eta2Source,
    pub level: f64,
    pub critical_value: f64,
    /// Maximal runs `[lo, hi]` of consecutive grid points with `LR <= eta2 * c(a)`.
    pub confidence_set: Vec<(f64, f64)>,
    pub n_in_set: usize,
    pub direction: Direction,
}

impl LrProfile {
    pub fn cutoff(&self) -> f64 {
        self.eta2 * self.critical_value
    }

    pub fn is_disconnected(&self) -> bool {
        self.confidence_set.len() > 1
    }

    /// LR at `gamma`, read off the grid point inducing the same regime split.
    pub fn lr_at(&self, gamma: f64) -> Option<f64> {
        self.grid.step_index(gamma, self.direction).and_then(|j| self.lr_values[j])
    }

    /// Whether `gamma` is in the confidence set.
    pub fn covers(&self, gamma: f64) -> bool {
        self.lr_at(gamma).is_some_and(|v| v <= self.cutoff())
    }
}

/// LR profile and confidence set from an RSS profile.
pub fn lr_confidence_set(
    profile: &RssProfile,
    sigma2_eps: f64,
    level: f64,
    eta2: f64,
    direction: Direction,
) -> Result<LrProfile> {
    let c = lr_critical_value(level)?;
    if !(eta2 > 0.0) || !eta2.is_finite() {
        return Err(Error::InvalidConfig(format!("eta2 must be positive, got {eta2}")));
    }
    let best = profile
        .argmin()
        .ok_or_else(|| Error::NoFeasibleGamma("RSS profile has no identified point".into()))?;
    let rss_hat = profile.rss[best].expect("argmin is identified");
    let lr_values: Vec<Option<f64>> = profile
        .rss
        .iter()
        .map(|r| r.map(|v| lr_statistic(v, rss_hat, sigma2_eps)).transpose())
        .collect::<Result<_>>()?;
    let cutoff = eta2 * c;
    let mut runs = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    let mut n_in_set = 0;
    for (g, lr) in profile.grid.values.iter().zip(&lr_values) {
        match lr {
            Some(v) if *v <= cutoff => {
                n_in_set += 1;
                open = Some(match open {
                    Some((lo, _)) => (lo, *g),
                    None => (*g, *g),
                });
            }
            _ => {
                if let Some(run) = open.take() {
                    runs.push(run);
                }
            }
        }
    }
    runs.extend(open);
    Ok(LrProfile {
        grid: profile.grid.clone(),
        lr_values,
        gamma_hat: profile.grid.values[best],
        sigma2_eps,
        eta2,
        eta2_source: if eta2 == 1.0 { Eta2Source::Default } else { Eta2Source::UserSupplied },
        level,
        critical_value: c,
        confidence_set: runs,
        n_in_set,
        direction,
    })
}

/// Per-unit LR profile with `sigma2 = RSS(gamma_hat) / T`.
pub fn unit_lr_profile(search: &ThresholdSearch, level: f64, eta2: f64, direction: Direction) -> Result<LrProfile> {
    lr_confidence_set(&search.profile, search.fit.sigma2_eps, level, eta2, direction)
}

/// Pooled LR profile with `sigma2 = RSS(gamma_hat) / (N T)`.
pub fn pooled_lr_profile(fit: &PooledFit, level: f64, eta2: f64, direction: Direction) -> Result<LrProfile> {
    lr_confidence_set(&fit.profile, fit.sigma2_eps(), level, eta2, direction)
}

/// Kernel plug-in for `eta^2` at the estimated threshold.
///
/// Nadaraya-Watson ratio of `(delta' w)^2 e^2` to `sigma2 (delta' w)^2` locally at
/// `q = gamma_hat`, Gaussian kernel, bandwidth `1.06 sd(q) T^(-1/5)`. Uses the
/// projected selected regressors and the CCE residuals of `fit`.
pub fn eta2_plugin(unit: &UnitData<'_>, fit: &UnitFit, proj: &Projector) -> Result<f64> {
    let t = unit.n_periods();
    let q = &unit.q;
    let mean = q.mean();
    let sd = (q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t as f64 - 1.0)).sqrt();
    let h = 1.06 * sd * (t as f64).powf(-0.2);
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("threshold variable has no spread".into()));
    }
    let w = proj.apply(&selected_columns(unit.x, unit.selection));
    let dw: DVector<f64> = &w * fit.delta();
    let (mut num, mut den) = (0.0, 0.0);
    for s in 0..t {
        let z = (q[s] - fit.gamma) / h;
        let k = (-0.5 * z * z).exp();
        let a = dw[s] * dw[s] * k;
        num += a * fit.residuals[s] * fit.residuals[s];
        den += a;
    }
    if !(den > 0.0) || !(fit.sigma2_eps > 0.0) {
        return Err(Error::NonPositiveVariance("kernel denominator vanished".into()));
    }
    Ok(num / (fit.sigma2_eps * den))
}

/// Per-unit LR profile with `eta^2` from [`eta2_plugin`].
pub fn unit_lr_profile_plugin(
    unit: &UnitData<'_>,
    search: &ThresholdSearch,
    proj: &Projector,
    level: f64,
) -> Result<LrProfile> {
    let eta2 = eta2_plugin(unit, &search.fit, proj)?;
    let mut p = lr_confidence_set(&search.profile, search.fit.sigma2_eps, level, eta2, unit.direction)?;
    p.eta2_source = Eta2Source::KernelPlugIn;
    Ok(p)
}
