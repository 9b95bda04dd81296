//! Sup-Wald tests of the linear model against a threshold alternative, for one
//! unit or for the panel with a pooled threshold coefficient, and wild-bootstrap
//! p-values.
//!
//! Both statistics are evaluated for many outcome draws at once: the bases that
//! depend only on the regressors and the candidate threshold are built once per
//! grid point and applied to a matrix whose columns are the draws.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cce::{default_bandwidth, min_regime_count};
use crate::dgp::derive_seed;
use crate::error::{Error, Result};
use crate::linalg::{inv_sym_checked, orthonormal_basis, COND_LIMIT, RANK_TOL};
use crate::panel::{regime_split, PanelDataset, Projector, UnitData};
use crate::threshold::GammaGrid;

/// Smallest accepted number of bootstrap replicates.
pub const MIN_BOOT: usize = 99;
pub const DEFAULT_BOOT: usize = 299;
/// Fraction of failed replicates above which a bootstrap is flagged.
const DROP_WARNING: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TestScope {
    Unit { unit: usize },
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Ok,
    /// More than 10% of bootstrap replicates failed.
    Warning,
}

/// Bootstrap distribution and p-value of a statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub p_value: f64,
    pub n_boot: usize,
    /// Successful replicate statistics in replicate order.
    pub boot_stats: Vec<f64>,
    pub n_dropped: usize,
    pub seed: u64,
    pub status: TestStatus,
}

/// Sup-Wald statistic with its per-grid-point values and optional bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub scope: TestScope,
    pub statistic: f64,
    /// Grid value attaining the supremum (smallest one on ties).
    pub gamma_at_sup: f64,
    pub grid: GammaGrid,
    /// `None` where the grid point was skipped.
    pub per_gamma_wald: Vec<Option<f64>>,
    /// Bartlett lag truncation used in the per-unit variance.
    pub lag: Option<usize>,
    pub p_value: Option<f64>,
    pub n_boot: usize,
    pub boot_stats: Vec<f64>,
    pub n_dropped: usize,
    pub seed: Option<u64>,
    pub status: TestStatus,
}

impl TestReport {
    fn from_profile(scope: TestScope, grid: &GammaGrid, per_gamma_wald: Vec<Option<f64>>, lag: Option<usize>) -> Result<Self> {
        let (j, stat) = sup_of(&per_gamma_wald).ok_or_else(|| {
            Error::NoFeasibleGamma(format!("Wald variance singular at all {} grid points", grid.len()))
        })?;
        Ok(Self {
            scope,
            statistic: stat,
            gamma_at_sup: grid.values[j],
            grid: grid.clone(),
            per_gamma_wald,
            lag,
            p_value: None,
            n_boot: 0,
            boot_stats: Vec::new(),
            n_dropped: 0,
            seed: None,
            status: TestStatus::Ok,
        })
    }

    pub fn with_bootstrap(mut self, boot: BootstrapOutcome) -> Self {
        self.p_value = Some(boot.p_value);
        self.n_boot = boot.n_boot;
        self.boot_stats = boot.boot_stats;
        self.n_dropped = boot.n_dropped;
        self.seed = Some(boot.seed);
        self.status = boot.status;
        self
    }

    /// Whether the bootstrap p-value is at or below `level`.
    pub fn rejects(&self, level: f64) -> Option<bool> {
        self.p_value.map(|p| p <= level)
    }
}

fn sup_of(values: &[Option<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in values.iter().enumerate() {
        if let Some(v) = v {
            match best {
                Some((_, b)) if *v <= b => {}
                _ => best = Some((j, *v)),
            }
        }
    }
    best
}

/// Wald form `scale * d' V^{-1} d` with `V = S^{-1} K S^{-1}`, i.e. `scale * (S d)' K^{-1} (S d)`.
fn wald_form(scale: f64, delta: &DVector<f64>, sigma: &DMatrix<f64>, meat: &DMatrix<f64>) -> Option<f64> {
    let sigma_inv = inv_sym_checked(sigma, COND_LIMIT)?;
    let v = &sigma_inv * meat * &sigma_inv;
    let v_inv = inv_sym_checked(&v, COND_LIMIT)?;
    let w = scale * (delta.transpose() * v_inv * delta)[(0, 0)];
    w.is_finite().then_some(w.max(0.0))
}

/// False when partialling removed all but a rounding-level remnant of some column.
fn survives_partialling(raw: &DMatrix<f64>, partialled: &DMatrix<f64>) -> bool {
    raw.column_iter().zip(partialled.column_iter()).all(|(a, b)| {
        let na = a.norm_squared();
        na > 0.0 && b.norm_squared() > RANK_TOL * RANK_TOL * na
    })
}

fn basis_with(first: &DMatrix<f64>, extra: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let t = first.nrows();
    let cols = first.ncols() + extra.iter().map(|m| m.ncols()).sum::<usize>();
    let mut a = DMatrix::zeros(t, cols);
    let mut c = 0;
    for m in std::iter::once(first).chain(extra.iter().copied()) {
        a.columns_mut(c, m.ncols()).copy_from(m);
        c += m.ncols();
    }
    orthonormal_basis(&a)
}

fn annihilate(q: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    if q.ncols() == 0 {
        return v.clone();
    }
    v - q * (q.transpose() * v)
}

/// Per-unit Wald statistics on each grid point for each column of `samples` (T x S).
///
/// The threshold regressor is partialled on `[A, X_i]` where `A` is the
/// projector basis; the variance is `Sigma^{-1} K Sigma^{-1}` with `K` a
/// Bartlett-weighted long-run covariance truncated at `lag`. Result is indexed
/// `[sample][grid point]`.
pub fn unit_wald_batch(
    unit: &UnitData<'_>,
    proj: &Projector,
    grid: &GammaGrid,
    lag: usize,
    samples: &DMatrix<f64>,
) -> Result<Vec<Vec<Option<f64>>>> {
    let t = unit.n_periods();
    if samples.nrows() != t || proj.n_rows() != t {
        return Err(Error::InvalidConfig("sample rows differ from T".into()));
    }
    if lag >= t {
        return Err(Error::Bandwidth { bandwidth: lag, periods: t });
    }
    let need = min_regime_count(unit.k(), unit.r());
    let q = basis_with(proj.basis(), &[unit.x]);
    let ydot = annihilate(&q, samples);
    let s_count = samples.ncols();
    let r = unit.r();
    let tf = t as f64;

    let per_gamma: Vec<Vec<Option<f64>>> = grid
        .values
        .par_iter()
        .map(|&gamma| {
            let rm = regime_split(unit.x, &unit.q, gamma, unit.selection, unit.direction);
            let f = rm.count_firing();
            if f < need || t - f < need {
                return vec![None; s_count];
            }
            let w = annihilate(&q, &rm.w_low);
            if !survives_partialling(&rm.w_low, &w) {
                return vec![None; s_count];
            }
            let gram = w.transpose() * &w;
            let Some(gram_inv) = inv_sym_checked(&gram, COND_LIMIT) else {
                return vec![None; s_count];
            };
            let sigma = &gram / tf;
            let deltas = &gram_inv * (w.transpose() * &ydot);
            let resid = &ydot - &w * &deltas;
            let mut out = Vec::with_capacity(s_count);
            for s in 0..s_count {
                let e = resid.column(s);
                let mut meat = DMatrix::zeros(r, r);
                for j in 0..=lag {
                    let weight = if j == 0 { 1.0 } else { 1.0 - j as f64 / (lag + 1) as f64 };
                    let mut kj = DMatrix::zeros(r, r);
                    for tt in j..t {
                        let ee = e[tt] * e[tt - j];
                        if ee == 0.0 {
                            continue;
                        }
                        for a in 0..r {
                            let wa = w[(tt, a)] * ee;
                            for b in 0..r {
                                kj[(a, b)] += wa * w[(tt - j, b)];
                            }
                        }
                    }
                    if j == 0 {
                        meat += kj;
                    } else {
                        meat += (&kj + kj.transpose()) * weight;
                    }
                }
                meat /= tf;
                let d = deltas.column(s).into_owned();
                out.push(wald_form(tf, &d, &sigma, &meat));
            }
            out
        })
        .collect();
    Ok(transpose(per_gamma, s_count))
}

fn transpose(per_gamma: Vec<Vec<Option<f64>>>, s_count: usize) -> Vec<Vec<Option<f64>>> {
    (0..s_count).map(|s| per_gamma.iter().map(|g| g[s]).collect()).collect()
}

/// Per-unit sup-Wald statistic (no bootstrap).
pub fn sup_wald_unit(
    unit: &UnitData<'_>,
    unit_index: usize,
    proj: &Projector,
    grid: &GammaGrid,
    lag: Option<usize>,
) -> Result<TestReport> {
    let lag = lag.unwrap_or_else(|| default_bandwidth(unit.n_periods()));
    let y = DMatrix::from_column_slice(unit.n_periods(), 1, unit.y.as_slice());
    let mut batch = unit_wald_batch(unit, proj, grid, lag, &y)?;
    TestReport::from_profile(TestScope::Unit { unit: unit_index }, grid, batch.swap_remove(0), Some(lag))
}

/// Pooled threshold coefficient at one grid point with its variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledDelta {
    pub gamma: f64,
    pub delta: DVector<f64>,
    /// `Sigma^{-1} K Sigma^{-1}`; squared standard errors are `diag / (N T)`.
    pub vcov: DMatrix<f64>,
    pub std_errors: DVector<f64>,
    pub wald: f64,
}

/// Regressor-only ingredients of the pooled statistic at one threshold value.
struct PooledBlock {
    bases: Vec<DMatrix<f64>>,
    w_tilde: Vec<DMatrix<f64>>,
    gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
}

impl PooledBlock {
    fn build(panel: &PanelDataset, proj: &Projector, gamma: f64) -> Result<Self> {
        let n = panel.n_units();
        let t = panel.n_periods();
        let r = panel.r();
        let splits: Vec<_> = (0..n)
            .map(|i| regime_split(panel.x(i), &panel.q_unit(i), gamma, panel.selection(), panel.direction()))
            .collect();
        let mut wbar = DMatrix::zeros(t, r);
        for s in &splits {
            wbar += &s.w_low;
        }
        wbar /= n as f64;
        let mut bases = Vec::with_capacity(n);
        let mut w_tilde = Vec::with_capacity(n);
        let mut gram = DMatrix::zeros(r, r);
        let mut raw = DMatrix::zeros(r, r);
        for (i, s) in splits.into_iter().enumerate() {
            let q = basis_with(proj.basis(), &[&wbar, panel.x(i)]);
            let w = annihilate(&q, &s.w_low);
            gram += w.transpose() * &w;
            raw += s.w_low.transpose() * &s.w_low;
            bases.push(q);
            w_tilde.push(w);
        }
        if (0..r).any(|j| !(gram[(j, j)] > RANK_TOL * RANK_TOL * raw[(j, j)])) {
            return Err(Error::Singular(format!("threshold regressors lie in the span of the averages at gamma = {gamma}")));
        }
        let gram_inv = inv_sym_checked(&gram, COND_LIMIT)
            .ok_or_else(|| Error::Singular(format!("pooled threshold-regressor Gram singular at gamma = {gamma}")))?;
        Ok(Self { bases, w_tilde, gram, gram_inv })
    }

    /// `(delta, V)` per sample column; `ys[i]` is T x S for unit i.
    fn evaluate(&self, ys: &[DMatrix<f64>]) -> Vec<Option<(DVector<f64>, DMatrix<f64>)>> {
        let n = ys.len();
        let t = ys[0].nrows();
        let s_count = ys[0].ncols();
        let r = self.gram.nrows();
        let nt = (n * t) as f64;
        let mut b = DMatrix::zeros(r, s_count);
        let mut ydots = Vec::with_capacity(n);
        for ((w, basis), y) in self.w_tilde.iter().zip(&self.bases).zip(ys) {
            b += w.transpose() * y;
            ydots.push(annihilate(basis, y));
        }
        let deltas = &self.gram_inv * b;
        let mut meats = vec![DMatrix::<f64>::zeros(r, r); s_count];
        for (w, ydot) in self.w_tilde.iter().zip(&ydots) {
            let e = ydot - w * &deltas;
            let e2 = e.component_mul(&e);
            for a in 0..r {
                for c in a..r {
                    let wab = w.column(a).component_mul(&w.column(c));
                    let sums = e2.transpose() * wab;
                    for s in 0..s_count {
                        meats[s][(a, c)] += sums[s];
                    }
                }
            }
        }
        let sigma = &self.gram / nt;
        let sigma_inv = inv_sym_checked(&sigma, COND_LIMIT);
        meats
            .into_iter()
            .enumerate()
            .map(|(s, mut meat)| {
                for a in 0..r {
                    for c in 0..a {
                        meat[(a, c)] = meat[(c, a)];
                    }
                }
                meat /= nt;
                let si = sigma_inv.as_ref()?;
                let v = si * meat * si;
                Some((deltas.column(s).into_owned(), v))
            })
            .collect()
    }
}

fn pooled_wald(nt: f64, delta: &DVector<f64>, v: &DMatrix<f64>) -> Option<f64> {
    let v_inv = inv_sym_checked(v, COND_LIMIT)?;
    let w = nt * (delta.transpose() * v_inv * delta)[(0, 0)];
    w.is_finite().then_some(w.max(0.0))
}

fn unit_columns(samples: &[DMatrix<f64>], n: usize, t: usize) -> Vec<DMatrix<f64>> {
    (0..n)
        .map(|i| DMatrix::from_fn(t, samples.len(), |s, b| samples[b][(s, i)]))
        .collect()
}

/// Pooled coefficient `delta_p(gamma)` and its heteroskedasticity-robust variance.
pub fn pooled_delta(panel: &PanelDataset, proj: &Projector, gamma: f64) -> Result<PooledDelta> {
    let block = PooledBlock::build(panel, proj, gamma)?;
    let ys = unit_columns(std::slice::from_ref(panel.y()), panel.n_units(), panel.n_periods());
    let (delta, vcov) = block
        .evaluate(&ys)
        .swap_remove(0)
        .ok_or_else(|| Error::Singular("pooled variance matrix singular".into()))?;
    let nt = (panel.n_units() * panel.n_periods()) as f64;
    let std_errors = vcov.diagonal().map(|v| (v.max(0.0) / nt).sqrt());
    let wald = pooled_wald(nt, &delta, &vcov)
        .ok_or_else(|| Error::Singular("pooled variance matrix singular".into()))?;
    Ok(PooledDelta { gamma, delta, vcov, std_errors, wald })
}

/// Pooled Wald statistics `[sample][grid point]` for outcome matrices `samples` (each T x N).
pub fn pooled_wald_batch(
    panel: &PanelDataset,
    proj: &Projector,
    grid: &GammaGrid,
    samples: &[DMatrix<f64>],
) -> Result<Vec<Vec<Option<f64>>>> {
    let (t, n) = panel.y().shape();
    if panel.n_units() < 2 {
        return Err(Error::InvalidConfig(
            "pooled test needs at least two units; with one unit the averages span its own regressors".into(),
        ));
    }
    if samples.iter().any(|m| m.shape() != (t, n)) {
        return Err(Error::InvalidConfig("sample shape differs from panel".into()));
    }
    let ys = unit_columns(samples, n, t);
    let nt = (n * t) as f64;
    let s_count = samples.len();
    let per_gamma: Vec<Vec<Option<f64>>> = grid
        .values
        .par_iter()
        .map(|&gamma| match PooledBlock::build(panel, proj, gamma) {
            Ok(block) => block
                .evaluate(&ys)
                .into_iter()
                .map(|dv| dv.and_then(|(d, v)| pooled_wald(nt, &d, &v)))
                .collect(),
            Err(_) => vec![None; s_count],
        })
        .collect();
    Ok(transpose(per_gamma, s_count))
}

/// Pooled sup-Wald statistic (no bootstrap).
pub fn sup_wald_pooled(panel: &PanelDataset, proj: &Projector, grid: &GammaGrid) -> Result<TestReport> {
    let mut batch = pooled_wald_batch(panel, proj, grid, std::slice::from_ref(panel.y()))?;
    TestReport::from_profile(TestScope::Pooled, grid, batch.swap_remove(0), None)
}

/// Linear CCE fit under the null: each outcome column regressed on `[A, X_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullFit {
    /// T x N.
    pub fitted: DMatrix<f64>,
    /// T x N.
    pub residuals: DMatrix<f64>,
}

impl NullFit {
    pub fn new(panel: &PanelDataset, proj: &Projector) -> Self {
        let (t, n) = panel.y().shape();
        let mut fitted = DMatrix::zeros(t, n);
        let mut residuals = DMatrix::zeros(t, n);
        for i in 0..n {
            let q = basis_with(proj.basis(), &[panel.x(i)]);
            let y = panel.y().column(i).into_owned();
            let e = annihilate(&q, &DMatrix::from_column_slice(t, 1, y.as_slice()));
            residuals.set_column(i, &e.column(0));
            fitted.set_column(i, &(y - e.column(0)));
        }
        Self { fitted, residuals }
    }

    /// Restriction to one unit's column.
    pub fn unit(&self, i: usize) -> NullFit {
        NullFit {
            fitted: self.fitted.columns(i, 1).into_owned(),
            residuals: self.residuals.columns(i, 1).into_owned(),
        }
    }

    /// Bootstrap outcome for replicate `b`: `fitted + v * residual` with Rademacher `v` per cell.
    pub fn draw(&self, seed: u64, b: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b);
        let mut out = self.fitted.clone();
        for (o, e) in out.iter_mut().zip(self.residuals.iter()) {
            if rng.random::<bool>() {
                *o += e;
            } else {
                *o -= e;
            }
        }
        out
    }
}

/// Wild-bootstrap p-value `(1 + #{b : stat_b >= stat}) / (B_ok + 1)`.
///
/// `batch` maps a slice of bootstrap outcome matrices to their statistics, with
/// `None` for a replicate that could not be evaluated.
pub fn wild_bootstrap_pvalue<F>(statistic: f64, null: &NullFit, n_boot: usize, seed: u64, batch: F) -> Result<BootstrapOutcome>
where
    F: Fn(&[DMatrix<f64>]) -> Vec<Option<f64>>,
{
    if n_boot < MIN_BOOT {
        return Err(Error::InvalidConfig(format!("at least {MIN_BOOT} bootstrap replicates required, got {n_boot}")));
    }
    let samples: Vec<DMatrix<f64>> = (0..n_boot as u64).into_par_iter().map(|b| null.draw(seed, b)).collect();
    let stats = batch(&samples);
    if stats.len() != n_boot {
        return Err(Error::Inconsistent("bootstrap batch returned the wrong number of statistics".into()));
    }
    Ok(bootstrap_outcome(statistic, stats, n_boot, seed))
}

fn bootstrap_outcome(statistic: f64, stats: Vec<Option<f64>>, n_boot: usize, seed: u64) -> BootstrapOutcome {
    let boot_stats: Vec<f64> = stats.into_iter().flatten().collect();
    let n_dropped = n_boot - boot_stats.len();
    let exceed = boot_stats.iter().filter(|b| **b >= statistic).count();
    let p_value = (1 + exceed) as f64 / (boot_stats.len() + 1) as f64;
    let status = if n_dropped as f64 > DROP_WARNING * n_boot as f64 { TestStatus::Warning } else { TestStatus::Ok };
    if status == TestStatus::Warning {
        log::warn!("{n_dropped} of {n_boot} bootstrap replicates failed");
    }
    BootstrapOutcome { p_value, n_boot, boot_stats, n_dropped, seed, status }
}

/// Bootstrap settings for the linearity tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub n_boot: usize,
    pub seed: u64,
    /// Per-unit Bartlett truncation; `None` uses `floor(T^{1/4})`.
    pub lag: Option<usize>,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self { n_boot: DEFAULT_BOOT, seed: 0, lag: None }
    }
}

fn sup_each(rows: Vec<Vec<Option<f64>>>) -> Vec<Option<f64>> {
    rows.iter().map(|r| sup_of(r).map(|(_, v)| v)).collect()
}

/// Per-unit sup-Wald with wild-bootstrap p-value. Unit `i` uses the seed `derive_seed(seed, i)`.
pub fn test_unit_linearity(
    panel: &PanelDataset,
    proj: &Projector,
    null: &NullFit,
    unit: usize,
    grid: &GammaGrid,
    opts: &TestOptions,
) -> Result<TestReport> {
    let data = panel.unit(unit);
    let report = sup_wald_unit(&data, unit, proj, grid, opts.lag)?;
    let lag = report.lag.expect("unit report has a lag");
    let t = panel.n_periods();
    let boot = wild_bootstrap_pvalue(report.statistic, &null.unit(unit), opts.n_boot, derive_seed(opts.seed, unit as u64), |samples| {
        let mut m = DMatrix::zeros(t, samples.len());
        for (b, s) in samples.iter().enumerate() {
            m.set_column(b, &s.column(0));
        }
        match unit_wald_batch(&data, proj, grid, lag, &m) {
            Ok(rows) => sup_each(rows),
            Err(_) => vec![None; samples.len()],
        }
    })?;
    Ok(report.with_bootstrap(boot))
}

/// Pooled sup-Wald with wild-bootstrap p-value.
pub fn test_pooled_linearity(
    panel: &PanelDataset,
    proj: &Projector,
    null: &NullFit,
    grid: &GammaGrid,
    opts: &TestOptions,
) -> Result<TestReport> {
    let report = sup_wald_pooled(panel, proj, grid)?;
    let boot = wild_bootstrap_pvalue(report.statistic, null, opts.n_boot, opts.seed, |samples| {
        match pooled_wald_batch(panel, proj, grid, samples) {
            Ok(rows) => sup_each(rows),
            Err(_) => vec![None; samples.len()],
        }
    })?;
    Ok(report.with_bootstrap(boot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpConfig, PerUnit};
    use crate::panel::{cce_projector, Direction};
    use crate::threshold::{build_grid, build_pooled_grid};
    use approx::assert_relative_eq;

    fn panel(c0: f64, seed: u64) -> PanelDataset {
        let cfg = DgpConfig {
            n_units: 8,
            n_periods: 60,
            c0: vec![c0],
            alpha: PerUnit::Common(0.0),
            seed,
            ..DgpConfig::default()
        };
        simulate(&cfg).unwrap().0
    }

    #[test]
    fn p_value_rank_formula() {
        let hi = bootstrap_outcome(10.0, vec![Some(1.0); 99], 99, 0);
        assert_relative_eq!(hi.p_value, 1.0 / 100.0);
        let lo = bootstrap_outcome(0.5, vec![Some(1.0); 99], 99, 0);
        assert_relative_eq!(lo.p_value, 1.0);
        let ties = bootstrap_outcome(1.0, vec![Some(1.0); 99], 99, 0);
        assert_relative_eq!(ties.p_value, 1.0);
    }

    #[test]
    fn drops_flag_warning() {
        let mut stats = vec![Some(1.0); 99];
        for s in stats.iter_mut().take(11) {
            *s = None;
        }
        let out = bootstrap_outcome(0.0, stats, 99, 0);
        assert_eq!(out.n_dropped, 11);
        assert_eq!(out.status, TestStatus::Warning);
        assert_eq!(out.boot_stats.len(), 88);
    }

    #[test]
    fn too_few_replicates() {
        let p = panel(0.0, 1);
        let proj = cce_projector(&p, false).unwrap();
        let null = NullFit::new(&p, &proj);
        assert!(wild_bootstrap_pvalue(1.0, &null, 50, 0, |s| vec![None; s.len()]).is_err());
    }

    #[test]
    fn scalar_wald_by_hand() {
        let p = panel(1.0, 2);
        let proj = cce_projector(&p, false).unwrap();
        let unit = p.unit(0);
        let grid = build_grid(unit.q.as_slice(), 0.15).unwrap();
        let rep = sup_wald_unit(&unit, 0, &proj, &grid, Some(0)).unwrap();
        let j = grid.len() / 2;
        let gamma = grid.values[j];
        // independent construction with dense projectors
        let t = p.n_periods();
        let mut a = DMatrix::zeros(t, proj.basis().ncols() + 2);
        a.columns_mut(0, proj.basis().ncols()).copy_from(proj.basis());
        a.columns_mut(proj.basis().ncols(), 2).copy_from(unit.x);
        let m = DMatrix::identity(t, t) - &a * (a.transpose() * &a).try_inverse().unwrap() * a.transpose();
        let rm = regime_split(unit.x, &unit.q, gamma, unit.selection, unit.direction);
        let w = &m * &rm.w_low;
        let yd = &m * &unit.y;
        let ww = (w.transpose() * &w)[(0, 0)];
        let d = (w.transpose() * &yd)[(0, 0)] / ww;
        let e = &yd - &w * d;
        let k0: f64 = (0..t).map(|s| e[s] * e[s] * w[(s, 0)] * w[(s, 0)]).sum::<f64>() / t as f64;
        let sig = ww / t as f64;
        let v = k0 / (sig * sig);
        let wald = t as f64 * d * d / v;
        assert_relative_eq!(rep.per_gamma_wald[j].unwrap(), wald, max_relative = 1e-8);
    }

    #[test]
    fn zero_coefficient_gives_zero_wald() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let meat = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.5]);
        assert_eq!(wald_form(100.0, &DVector::zeros(2), &sigma, &meat), Some(0.0));
        assert_eq!(pooled_wald(100.0, &DVector::zeros(2), &meat), Some(0.0));
        assert_eq!(sup_of(&[Some(0.0), None, Some(0.0)]), Some((0, 0.0)));
    }

    #[test]
    fn pooled_delta_matches_accumulate_then_solve() {
        let p = panel(1.0, 4);
        let proj = cce_projector(&p, false).unwrap();
        let grid = build_pooled_grid(&p, 0.2).unwrap();
        let gamma = grid.values[grid.len() / 3];
        let got = pooled_delta(&p, &proj, gamma).unwrap();
        let (t, n) = p.y().shape();
        let splits: Vec<_> = (0..n).map(|i| regime_split(p.x(i), &p.q_unit(i), gamma, p.selection(), p.direction())).collect();
        let mut wbar = DMatrix::zeros(t, 1);
        for s in &splits {
            wbar += &s.w_low;
        }
        wbar /= n as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        let mut ms = Vec::new();
        for (i, split) in splits.iter().enumerate() {
            let xb = proj.basis();
            let mut a = DMatrix::zeros(t, xb.ncols() + 3);
            a.columns_mut(0, xb.ncols()).copy_from(xb);
            a.columns_mut(xb.ncols(), 1).copy_from(&wbar);
            a.columns_mut(xb.ncols() + 1, 2).copy_from(p.x(i));
            let m = DMatrix::identity(t, t) - &a * (a.transpose() * &a).try_inverse().unwrap() * a.transpose();
            let wi = &split.w_low;
            num += (wi.transpose() * &m * p.y().column(i))[(0, 0)];
            den += (wi.transpose() * &m * wi)[(0, 0)];
            ms.push(m);
        }
        let d = num / den;
        assert_relative_eq!(got.delta[0], d, max_relative = 1e-9);
        let mut meat = 0.0;
        for (i, (m, split)) in ms.iter().zip(&splits).enumerate() {
            let wt = m * &split.w_low;
            let e = m * p.y().column(i) - &wt * d;
            meat += (0..t).map(|s| e[s] * e[s] * wt[(s, 0)] * wt[(s, 0)]).sum::<f64>();
        }
        let nt = (n * t) as f64;
        let v = (meat / nt) / (den / nt).powi(2);
        assert_relative_eq!(got.vcov[(0, 0)], v, max_relative = 1e-8);
        assert_relative_eq!(got.wald, nt * d * d / v, max_relative = 1e-8);
    }

    #[test]
    fn single_unit_pooled_rejected() {
        let cfg = DgpConfig { n_units: 1, n_periods: 50, seed: 5, ..DgpConfig::default() };
        let (p, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&p, false).unwrap();
        let grid = build_pooled_grid(&p, 0.1).unwrap();
        assert!(sup_wald_pooled(&p, &proj, &grid).is_err());
        assert!(pooled_delta(&p, &proj, grid.values[5]).is_err());
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let p = panel(0.0, 6);
        let proj = cce_projector(&p, false).unwrap();
        let null = NullFit::new(&p, &proj);
        let grid = build_pooled_grid(&p, 0.15).unwrap().thin(15);
        let opts = TestOptions { n_boot: 99, seed: 17, lag: None };
        let a = test_pooled_linearity(&p, &proj, &null, &grid, &opts).unwrap();
        let b = test_pooled_linearity(&p, &proj, &null, &grid, &opts).unwrap();
        assert_eq!(a.boot_stats, b.boot_stats);
        assert_eq!(a.p_value, b.p_value);
        let c = test_pooled_linearity(&p, &proj, &null, &grid, &TestOptions { seed: 18, ..opts }).unwrap();
        assert_ne!(a.boot_stats, c.boot_stats);
    }

    #[test]
    fn multiplier_mean_recovers_fitted() {
        let p = panel(0.5, 7);
        let proj = cce_projector(&p, false).unwrap();
        let null = NullFit::new(&p, &proj).unit(0);
        let reps = 10_000;
        let mut acc = DMatrix::zeros(p.n_periods(), 1);
        for b in 0..reps {
            acc += null.draw(99, b);
        }
        acc /= reps as f64;
        let scale = null.residuals.amax();
        // standard error of the mean multiplier is 1/sqrt(reps) = 0.01
        assert!((acc - &null.fitted).amax() < 5.0 * 0.01 * scale);
    }

    #[test]
    fn strong_threshold_beats_own_bootstrap() {
        let cfg = DgpConfig { n_units: 4, n_periods: 200, alpha: PerUnit::Common(0.0), c0: vec![1.0], seed: 8, ..DgpConfig::default() };
        let (p, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&p, false).unwrap();
        let null = NullFit::new(&p, &proj);
        let grid = build_grid(p.q_unit(0).as_slice(), 0.1).unwrap();
        let rep = test_unit_linearity(&p, &proj, &null, 0, &grid, &TestOptions { n_boot: 199, seed: 1, lag: None }).unwrap();
        let mut sorted = rep.boot_stats.clone();
        sorted.sort_by(f64::total_cmp);
        let q99 = sorted[(0.99 * sorted.len() as f64).ceil() as usize - 1];
        assert!(rep.statistic > q99, "stat {} vs q99 {}", rep.statistic, q99);
    }

    #[test]
    fn geq_direction_runs() {
        let cfg = DgpConfig { n_units: 5, n_periods: 60, direction: Direction::HighRegimeGeq, seed: 9, ..DgpConfig::default() };
        let (p, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&p, false).unwrap();
        let grid = build_pooled_grid(&p, 0.1).unwrap();
        let rep = sup_wald_pooled(&p, &proj, &grid).unwrap();
        assert!(rep.per_gamma_wald.iter().flatten().all(|w| *w >= 0.0));
    }
}
