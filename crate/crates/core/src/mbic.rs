//! Information criterion for choosing between the fully heterogeneous and the
//! common-threshold model.

use serde::{Deserialize, Serialize};

use crate::cce::UnitFit;
use crate::error::{Error, Result};
use crate::threshold::PooledFit;

const TIE_TOL: f64 = 1e-12;

/// `ln(sigma2) + penalty1 * k1 + penalty2 * k2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MbicScore {
    pub sigma2: f64,
    pub k1: usize,
    pub k2: usize,
    /// `ln(T) / (N T)`.
    pub penalty1: f64,
    /// `ln(N T) / (N T)`.
    pub penalty2: f64,
    pub score: f64,
}

impl MbicScore {
    pub fn new(sigma2: f64, n: usize, t: usize, k1: usize, k2: usize) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::NonPositiveVariance(format!("criterion variance {sigma2}")));
        }
        if n == 0 || t == 0 {
            return Err(Error::InvalidConfig("criterion needs N, T > 0".into()));
        }
        let nt = (n * t) as f64;
        let penalty1 = (t as f64).ln() / nt;
        let penalty2 = nt.ln() / nt;
        let score = sigma2.ln() + penalty1 * k1 as f64 + penalty2 * k2 as f64;
        Ok(Self { sigma2, k1, k2, penalty1, penalty2, score })
    }
}

/// Heterogeneous model: mean of the unit error variances, `K1 = N (K + r + 1)`, `K2 = 0`.
pub fn mbic_heterogeneous(fits: &[UnitFit], n: usize, t: usize, k: usize, r: usize) -> Result<MbicScore> {
    if fits.len() != n {
        return Err(Error::InvalidConfig(format!("{} unit fits for N = {n}", fits.len())));
    }
    if let Some(f) = fits.iter().find(|f| !(f.sigma2_eps > 0.0)) {
        return Err(Error::NonPositiveVariance(format!("unit error variance {} at gamma {}", f.sigma2_eps, f.gamma)));
    }
    let sigma2 = fits.iter().map(|f| f.sigma2_eps).sum::<f64>() / n as f64;
    MbicScore::new(sigma2, n, t, n * (k + r + 1), 0)
}

/// Common-threshold model: pooled `RSS / (N T)`, `K1 = N (K + r)`, `K2 = 1`.
pub fn mbic_semi(pooled: &PooledFit, n: usize, t: usize, k: usize, r: usize) -> Result<MbicScore> {
    if pooled.n_units() != n {
        return Err(Error::InvalidConfig(format!("{} unit fits for N = {n}", pooled.n_units())));
    }
    MbicScore::new(pooled.total_rss / (n * t) as f64, n, t, n * (k + r), 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    FullyHeterogeneous,
    SemiHomogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub choice: ModelChoice,
    /// `|score_het - score_semi|`.
    pub margin: f64,
    pub tie: bool,
}

/// Smaller score wins; ties within 1e-12 go to the common-threshold model.
pub fn select_model(score_het: &MbicScore, score_semi: &MbicScore) -> Selection {
    let diff = score_het.score - score_semi.score;
    let tie = diff.abs() < TIE_TOL;
    let choice = if !tie && diff < 0.0 { ModelChoice::FullyHeterogeneous } else { ModelChoice::SemiHomogeneous };
    Selection { choice, margin: diff.abs(), tie }
}
