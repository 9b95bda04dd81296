//! Synthetic panels with threshold effects, a factor error structure and
//! factor-driven regressors, together with the drawn truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{selected_columns, Direction, PanelDataset};

/// A parameter that is either shared by all units or given unit by unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerUnit {
    Common(f64),
    Each(Vec<f64>),
}

impl PerUnit {
    pub fn get(&self, i: usize) -> f64 {
        match self {
            PerUnit::Common(v) => *v,
            PerUnit::Each(v) => v[i],
        }
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        match self {
            PerUnit::Each(v) if v.len() != n => {
                Err(Error::InvalidConfig(format!("{what}: {} values for {n} units", v.len())))
            }
            _ => Ok(()),
        }
    }

    fn values(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        (0..n).map(move |i| self.get(i))
    }
}

impl From<f64> for PerUnit {
    fn from(v: f64) -> Self {
        PerUnit::Common(v)
    }
}

/// Generator settings.
///
/// `beta_i = beta + N(0, beta_sd^2)` elementwise, `C_0i = c0 + N(0, c_sd^2)`,
/// `delta_i = C_0i * T^(-alpha_i)`. Factors and idiosyncratic regressor noise are
/// standard normal; loadings are uniform on `[loading_low, loading_high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub k_regressors: usize,
    pub selection: Vec<bool>,
    pub m_factors: usize,
    pub beta: Vec<f64>,
    pub beta_sd: f64,
    pub c0: Vec<f64>,
    pub c_sd: f64,
    pub alpha: PerUnit,
    pub gamma: PerUnit,
    pub loading_low: f64,
    pub loading_high: f64,
    /// Marginal variance of the idiosyncratic error.
    pub sigma2_eps: PerUnit,
    /// AR(1) coefficient of the idiosyncratic error (stationary start).
    pub ar_eps: f64,
    /// Index of the regressor used as threshold variable.
    pub threshold_source: usize,
    pub direction: Direction,
    /// Minimum observations per regime at the true threshold; `None` uses `max(5, ceil(0.05 T))`.
    pub min_regime: Option<usize>,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_units: 30,
            n_periods: 100,
            k_regressors: 2,
            selection: vec![true, false],
            m_factors: 1,
            beta: vec![1.0, 1.0],
            beta_sd: 0.0,
            c0: vec![1.0],
            c_sd: 0.0,
            alpha: PerUnit::Common(0.2),
            gamma: PerUnit::Common(0.0),
            loading_low: 0.5,
            loading_high: 1.5,
            sigma2_eps: PerUnit::Common(1.0),
            ar_eps: 0.0,
            threshold_source: 1,
            direction: Direction::LowRegimeLeq,
            min_regime: None,
            seed: 0,
        }
    }
}

/// Splits a base seed into decorrelated child seeds (SplitMix64 finaliser).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_REDRAWS: usize = 1000;

impl DgpConfig {
    pub fn r(&self) -> usize {
        self.selection.iter().filter(|s| **s).count()
    }

    pub fn min_regime_count(&self) -> usize {
        self.min_regime
            .unwrap_or_else(|| 5usize.max((0.05 * self.n_periods as f64).ceil() as usize))
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t, k) = (self.n_units, self.n_periods, self.k_regressors);
        if n == 0 || t == 0 || k == 0 {
            return Err(Error::InvalidConfig("units, periods and regressors must be positive".into()));
        }
        if self.m_factors > k {
            return Err(Error::RankCondition { factors: self.m_factors, regressors: k });
        }
        if self.selection.len() != k || self.r() == 0 {
            return Err(Error::InvalidConfig("selection needs K entries with at least one set".into()));
        }
        if self.beta.len() != k {
            return Err(Error::InvalidConfig(format!("beta has {} entries, K = {k}", self.beta.len())));
        }
        if self.c0.len() != self.r() {
            return Err(Error::InvalidConfig(format!("c0 has {} entries, r = {}", self.c0.len(), self.r())));
        }
        if self.threshold_source >= k {
            return Err(Error::InvalidConfig("threshold_source out of range".into()));
        }
        for (p, name) in [(&self.alpha, "alpha"), (&self.gamma, "gamma"), (&self.sigma2_eps, "sigma2_eps")] {
            p.check_len(n, name)?;
        }
        if self.alpha.values(n).any(|a| !(0.0..0.5).contains(&a)) {
            return Err(Error::InvalidConfig("alpha must lie in [0, 0.5)".into()));
        }
        if self.sigma2_eps.values(n).any(|v| !(v >= 0.0)) || !(self.beta_sd >= 0.0) || !(self.c_sd >= 0.0) {
            return Err(Error::InvalidConfig("variances must be non-negative".into()));
        }
        if self.gamma.values(n).any(|g| !g.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be finite".into()));
        }
        if !(self.loading_low <= self.loading_high) {
            return Err(Error::InvalidConfig("loading_low exceeds loading_high".into()));
        }
        if !(self.ar_eps.abs() < 1.0) {
            return Err(Error::InvalidConfig("ar_eps must lie in (-1, 1)".into()));
        }
        if 2 * self.min_regime_count() > t {
            return Err(Error::InvalidConfig("T too short for the minimum regime size".into()));
        }
        Ok(())
    }
}

/// Every drawn parameter of a simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    /// N x K.
    pub beta: Vec<Vec<f64>>,
    /// N x r, `C_0i * T^(-alpha_i)`.
    pub delta: Vec<Vec<f64>>,
    /// N x r.
    pub c0i: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    /// N x m.
    pub lambda: Vec<Vec<f64>>,
    /// N entries of m x K, row-major.
    pub pi: Vec<Vec<f64>>,
    /// T x m.
    pub factors: Vec<Vec<f64>>,
    pub sigma2_eps: Vec<f64>,
    /// Regressor redraws needed per unit to satisfy the regime-size rule.
    pub redraws: Vec<usize>,
    /// Population mean of `theta_i = (beta_i, delta_i)`.
    pub theta_mean: Vec<f64>,
}

impl Truth {
    pub fn theta_mean(&self) -> DVector<f64> {
        DVector::from_vec(self.theta_mean.clone())
    }
}

/// Per-unit (firing, non-firing) period counts at the given thresholds.
pub fn regime_counts(panel: &PanelDataset, gamma: &[f64]) -> Vec<(usize, usize)> {
    let t = panel.n_periods();
    (0..panel.n_units())
        .map(|i| {
            let g = gamma.get(i).copied().unwrap_or(gamma[0]);
            let low = panel.q().column(i).iter().filter(|q| panel.direction().fires(**q, g)).count();
            (low, t - low)
        })
        .collect()
}

fn draw_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Draws a panel from `config`. Identical configs give bit-identical output.
pub fn simulate(config: &DgpConfig) -> Result<(PanelDataset, Truth)> {
    config.validate()?;
    let (n, t, k, m, r) = (config.n_units, config.n_periods, config.k_regressors, config.m_factors, config.r());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let load = Uniform::new_inclusive(config.loading_low, config.loading_high)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let beta_law = Normal::new(0.0, config.beta_sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let c_law = Normal::new(0.0, config.c_sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let need = config.min_regime_count();

    // column-major fill: draws run factor by factor over time
    let f = draw_matrix(&mut rng, t, m);

    let mut y = DMatrix::zeros(t, n);
    let mut q = DMatrix::zeros(t, n);
    let mut xs = Vec::with_capacity(n);
    let mut truth = Truth {
        beta: Vec::with_capacity(n),
        delta: Vec::with_capacity(n),
        c0i: Vec::with_capacity(n),
        alpha: config.alpha.values(n).collect(),
        gamma: config.gamma.values(n).collect(),
        lambda: Vec::with_capacity(n),
        pi: Vec::with_capacity(n),
        factors: (0..t).map(|s| f.row(s).iter().copied().collect()).collect(),
        sigma2_eps: config.sigma2_eps.values(n).collect(),
        redraws: Vec::with_capacity(n),
        theta_mean: Vec::new(),
    };

    for i in 0..n {
        let lambda = DVector::from_fn(m, |_, _| rng.sample(load));
        let pi = DMatrix::from_fn(m, k, |_, _| rng.sample(load));
        let beta = DVector::from_fn(k, |j, _| config.beta[j] + rng.sample(beta_law));
        let c0i = DVector::from_fn(r, |j, _| config.c0[j] + rng.sample(c_law));
        let alpha = truth.alpha[i];
        let delta = &c0i * (t as f64).powf(-alpha);
        let gamma = truth.gamma[i];

        let common = &f * &pi;
        let mut redraws = 0;
        let x = loop {
            let x = &common + draw_matrix(&mut rng, t, k);
            let low = x.column(config.threshold_source).iter().filter(|v| config.direction.fires(**v, gamma)).count();
            if low >= need && t - low >= need {
                break x;
            }
            redraws += 1;
            if redraws >= MAX_REDRAWS {
                return Err(Error::Identification {
                    gamma,
                    reason: format!("unit {i}: no regressor draw gives {need} observations per regime"),
                });
            }
        };

        let s2 = truth.sigma2_eps[i];
        let rho = config.ar_eps;
        let mut eps = DVector::zeros(t);
        let innov_sd = (s2 * (1.0 - rho * rho)).sqrt();
        for s in 0..t {
            let u: f64 = rng.sample(StandardNormal);
            eps[s] = if s == 0 { s2.sqrt() * u } else { rho * eps[s - 1] + innov_sd * u };
        }

        let w = selected_columns(&x, &config.selection);
        let qi = x.column(config.threshold_source).into_owned();
        let wd = &w * &delta;
        let fl = &f * &lambda;
        let xb = &x * &beta;
        for s in 0..t {
            let step = if config.direction.fires(qi[s], gamma) { wd[s] } else { 0.0 };
            y[(s, i)] = xb[s] + step + fl[s] + eps[s];
        }
        q.set_column(i, &qi);
        xs.push(x);

        truth.beta.push(beta.iter().copied().collect());
        truth.delta.push(delta.iter().copied().collect());
        truth.c0i.push(c0i.iter().copied().collect());
        truth.lambda.push(lambda.iter().copied().collect());
        truth.pi.push(pi.transpose().iter().copied().collect());
        truth.redraws.push(redraws);
    }

    let mean_shrink = truth.alpha.iter().map(|a| (t as f64).powf(-a)).sum::<f64>() / n as f64;
    truth.theta_mean = config.beta.iter().copied().chain(config.c0.iter().map(|c| c * mean_shrink)).collect();

    let panel = PanelDataset::new(y, xs, q, config.selection.clone(), config.direction)?;
    Ok((panel, truth))
}
