//! Threshold grids and least-squares threshold search, per unit and pooled.
//!
//! The residual sum of squares is a step function of the threshold, so the
//! search only visits observed values of the threshold variable. For a sweep
//! over the grid the normal-equation blocks are updated incrementally as
//! observations enter the firing regime; the fit at the selected threshold is
//! then recomputed through the SVD path in [`crate::cce`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cce::{cce_fit_given_gamma, min_regime_count, UnitFit, VcovKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::panel::{selected_columns, Direction, PanelDataset, Projector, UnitData};

/// Default fraction trimmed from each end of the grid.
pub const DEFAULT_TRIM: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GridSource {
    Values,
    PerUnit { unit: usize },
    PooledCommonSupport,
}

/// Candidate threshold values: distinct observed values of the threshold
/// variable with the extremes trimmed away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaGrid {
    pub values: Vec<f64>,
    pub trim_lo: f64,
    pub trim_hi: f64,
    pub source: GridSource,
    /// Distinct candidate values before trimming.
    pub n_distinct: usize,
    /// Set when the grid was thinned to evenly spaced order statistics.
    pub thinned_from: Option<usize>,
}

impl GammaGrid {
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Keeps at most `max_points` evenly spaced grid values (endpoints included).
    pub fn thin(mut self, max_points: usize) -> Self {
        let n = self.values.len();
        if max_points < 2 || n <= max_points {
            return self;
        }
        let picked: Vec<f64> = (0..max_points)
            .map(|j| {
                let idx = (j as f64 * (n - 1) as f64 / (max_points - 1) as f64).round() as usize;
                self.values[idx]
            })
            .collect();
        let mut picked = picked;
        picked.dedup();
        self.values = picked;
        self.thinned_from = Some(n);
        self
    }

    /// Grid value whose regime partition equals that of `gamma`, if any.
    ///
    /// Under `q <= gamma` the partition is constant between consecutive distinct
    /// values, so `gamma` maps to the largest grid value not exceeding it; under
    /// `q >= gamma` to the smallest grid value not below it.
    pub fn step_index(&self, gamma: f64, direction: Direction) -> Option<usize> {
        match direction {
            Direction::LowRegimeLeq => {
                let n = self.values.partition_point(|v| *v <= gamma);
                n.checked_sub(1)
            }
            Direction::HighRegimeGeq => {
                let n = self.values.partition_point(|v| *v < gamma);
                (n < self.values.len()).then_some(n)
            }
        }
    }
}

fn trim_count(trim: f64, n: usize) -> usize {
    let raw = trim * n as f64;
    let r = raw.round();
    if (raw - r).abs() < 1e-9 {
        r as usize
    } else {
        raw.floor() as usize
    }
}

fn distinct_sorted(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Distinct sorted values with `floor(trim * n)` removed at each end.
pub fn build_grid(q: &[f64], trim: f64) -> Result<GammaGrid> {
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::InvalidConfig(format!("trim fraction {trim} outside [0, 0.5)")));
    }
    let distinct = distinct_sorted(q.iter().copied());
    let n = distinct.len();
    let cut = trim_count(trim, n);
    let values: Vec<f64> = if 2 * cut < n { distinct[cut..n - cut].to_vec() } else { Vec::new() };
    if values.len() < 3 {
        return Err(Error::EmptyGrid(format!(
            "{} distinct values survive trimming {} of {n}; at least 3 needed",
            values.len(),
            trim
        )));
    }
    Ok(GammaGrid {
        values,
        trim_lo: trim,
        trim_hi: trim,
        source: GridSource::Values,
        n_distinct: n,
        thinned_from: None,
    })
}

/// Grid from one unit's threshold variable.
pub fn build_unit_grid(panel: &PanelDataset, unit: usize, trim: f64) -> Result<GammaGrid> {
    let q = panel.q_unit(unit);
    let mut g = build_grid(q.as_slice(), trim)?;
    g.source = GridSource::PerUnit { unit };
    Ok(g)
}

/// Grid from the pooled threshold values restricted to the intersection of unit supports.
pub fn build_pooled_grid(panel: &PanelDataset, trim: f64) -> Result<GammaGrid> {
    let q = panel.q();
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for i in 0..panel.n_units() {
        let col = q.column(i);
        lower = lower.max(col.min());
        upper = upper.min(col.max());
    }
    if lower > upper {
        return Err(Error::DisjointSupport { lower, upper });
    }
    let pooled = q.iter().copied().filter(|v| *v >= lower && *v <= upper);
    let mut g = build_grid(&pooled.collect::<Vec<_>>(), trim)?;
    g.source = GridSource::PooledCommonSupport;
    Ok(g)
}

/// Residual sums of squares along a grid; `None` marks unidentified grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssProfile {
    pub grid: GammaGrid,
    pub rss: Vec<Option<f64>>,
}

impl RssProfile {
    /// Index of the smallest RSS; ties go to the smallest threshold.
    pub fn argmin(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (j, r) in self.rss.iter().enumerate() {
            if let Some(v) = r {
                match best {
                    Some((_, b)) if *v >= b => {}
                    _ => best = Some((j, *v)),
                }
            }
        }
        best.map(|(j, _)| j)
    }

    pub fn n_skipped(&self) -> usize {
        self.rss.iter().filter(|r| r.is_none()).count()
    }

    pub fn min_rss(&self) -> Option<f64> {
        self.argmin().and_then(|j| self.rss[j])
    }
}

/// CCE residual sum of squares of one unit at every value of `gammas`.
///
/// Values in `gammas` need not be sorted. A point is `None` when either regime
/// holds fewer than `K + r + 1` observations or the projected design is
/// numerically collinear.
pub fn rss_profile(unit: &UnitData<'_>, proj: &Projector, gammas: &[f64]) -> Vec<Option<f64>> {
    let t = unit.n_periods();
    let k = unit.k();
    let r = unit.r();
    let need = min_regime_count(k, r);
    let xt = proj.apply(unit.x);
    let yt = proj.apply_vec(&unit.y);
    let u = proj.range();
    let p = u.ncols();
    let w = selected_columns(unit.x, unit.selection);

    let a = xt.transpose() * &xt;
    let ax = xt.transpose() * &yt;
    let yy = yt.norm_squared();

    let leq = unit.direction == Direction::LowRegimeLeq;
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&i, &j| {
        let c = unit.q[i].total_cmp(&unit.q[j]);
        if leq {
            c
        } else {
            c.reverse()
        }
    });
    let mut g_order: Vec<usize> = (0..gammas.len()).collect();
    g_order.sort_by(|&i, &j| {
        let c = gammas[i].total_cmp(&gammas[j]);
        if leq {
            c
        } else {
            c.reverse()
        }
    });

    let mut b = DMatrix::<f64>::zeros(k, r);
    let mut uw = DMatrix::<f64>::zeros(p, r);
    let mut ww = DMatrix::<f64>::zeros(r, r);
    let mut d = DVector::<f64>::zeros(r);
    let mut count = 0usize;
    let mut ptr = 0usize;

    let dim = k + r;
    let mut g = DMatrix::<f64>::zeros(dim, dim);
    g.view_mut((0, 0), (k, k)).copy_from(&a);
    let mut rhs = DVector::<f64>::zeros(dim);
    rhs.rows_mut(0, k).copy_from(&ax);

    let mut out = vec![None; gammas.len()];
    for gi in g_order {
        let gamma = gammas[gi];
        if !gamma.is_finite() {
            continue;
        }
        while ptr < t && unit.direction.fires(unit.q[order[ptr]], gamma) {
            let s = order[ptr];
            for c in 0..r {
                let wc = w[(s, c)];
                if wc != 0.0 {
                    for a_ in 0..k {
                        b[(a_, c)] += xt[(s, a_)] * wc;
                    }
                    for j in 0..p {
                        uw[(j, c)] += u[(s, j)] * wc;
                    }
                    for e in 0..r {
                        ww[(c, e)] += wc * w[(s, e)];
                    }
                    d[c] += wc * yt[s];
                }
            }
            count += 1;
            ptr += 1;
        }
        if count < need || t - count < need {
            continue;
        }
        let c_mat = &ww - uw.transpose() * &uw;
        g.view_mut((0, k), (k, r)).copy_from(&b);
        g.view_mut((k, 0), (r, k)).copy_from(&b.transpose());
        g.view_mut((k, k), (r, r)).copy_from(&c_mat);
        rhs.rows_mut(k, r).copy_from(&d);
        if let Some(sol) = linalg::spd_solve(&g, &rhs) {
            let rss = yy - rhs.dot(&sol);
            out[gi] = Some(rss.max(0.0));
        }
    }
    out
}

/// Outcome of a per-unit threshold search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub fit: UnitFit,
    pub profile: RssProfile,
}

/// Least-squares threshold for one unit over `grid`.
pub fn fit_unit_threshold(
    unit: &UnitData<'_>,
    proj: &Projector,
    grid: &GammaGrid,
    vcov: VcovKind,
) -> Result<ThresholdSearch> {
    let rss = rss_profile(unit, proj, &grid.values);
    let profile = RssProfile { grid: grid.clone(), rss };
    let best = profile.argmin().ok_or_else(|| {
        Error::NoFeasibleGamma(format!(
            "all {} grid points fail identification",
            grid.len()
        ))
    })?;
    if profile.n_skipped() > 0 {
        log::debug!("{} of {} grid points skipped", profile.n_skipped(), grid.len());
    }
    let gamma = grid.values[best];
    let fit = cce_fit_given_gamma(
        unit.x,
        &unit.y,
        &unit.q,
        gamma,
        proj,
        unit.selection,
        unit.direction,
        vcov,
    )?;
    Ok(ThresholdSearch { fit, profile })
}

/// Shared settings for the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationOptions {
    pub trim: f64,
    pub vcov: VcovKind,
    /// Treat the intercept as a known common factor (prepend ones to the averages).
    pub intercept_factor: bool,
    /// Thin grids to at most this many points.
    pub max_grid_points: Option<usize>,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self { trim: DEFAULT_TRIM, vcov: VcovKind::Hc, intercept_factor: false, max_grid_points: None }
    }
}

impl EstimationOptions {
    fn finish(&self, g: GammaGrid) -> GammaGrid {
        match self.max_grid_points {
            Some(m) => g.thin(m),
            None => g,
        }
    }
    pub fn unit_grid(&self, panel: &PanelDataset, unit: usize) -> Result<GammaGrid> {
        Ok(self.finish(build_unit_grid(panel, unit, self.trim)?))
    }
    pub fn pooled_grid(&self, panel: &PanelDataset) -> Result<GammaGrid> {
        Ok(self.finish(build_pooled_grid(panel, self.trim)?))
    }
}

/// Per-unit searches over each unit's own grid. Failures are kept per unit.
pub fn fit_all_units(
    panel: &PanelDataset,
    proj: &Projector,
    opts: &EstimationOptions,
) -> Vec<Result<ThresholdSearch>> {
    (0..panel.n_units())
        .into_par_iter()
        .map(|i| {
            let grid = opts.unit_grid(panel, i)?;
            fit_unit_threshold(&panel.unit(i), proj, &grid, opts.vcov)
        })
        .collect()
}

/// Common-threshold (semi-homogeneous) fit with mean-group slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFit {
    pub gamma: f64,
    pub unit_fits: Vec<UnitFit>,
    /// Mean of the unit coefficient vectors.
    pub theta_mg: DVector<f64>,
    /// `(N-1)^{-1} sum (theta_i - theta_mg)(theta_i - theta_mg)'`.
    pub sigma_mg: DMatrix<f64>,
    pub total_rss: f64,
    /// Summed RSS over units at each grid point.
    pub profile: RssProfile,
}

impl PooledFit {
    pub fn n_units(&self) -> usize {
        self.unit_fits.len()
    }
    /// Standard errors of the mean-group estimator, `sqrt(diag(Sigma_MG) / N)`.
    pub fn mg_std_errors(&self) -> DVector<f64> {
        let n = self.n_units() as f64;
        self.sigma_mg.diagonal().map(|v| (v.max(0.0) / n).sqrt())
    }
    /// `RSS / (N T)`.
    pub fn sigma2_eps(&self) -> f64 {
        let nt = self.unit_fits.iter().map(|f| f.n_obs).sum::<usize>() as f64;
        self.total_rss / nt
    }
}

/// Mean and `(N-1)`-denominator dispersion of coefficient vectors.
pub fn mean_group(thetas: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = thetas.len();
    if n < 2 {
        return Err(Error::InvalidConfig("mean-group variance needs at least two units".into()));
    }
    let p = thetas[0].len();
    let mut mean = DVector::zeros(p);
    for th in thetas {
        mean += th;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(p, p);
    for th in thetas {
        let d = th - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Summed per-unit RSS along a common grid; a point is skipped when any unit is unidentified there.
pub fn pooled_rss_profile(panel: &PanelDataset, proj: &Projector, grid: &GammaGrid) -> RssProfile {
    let per_unit: Vec<Vec<Option<f64>>> = (0..panel.n_units())
        .into_par_iter()
        .map(|i| rss_profile(&panel.unit(i), proj, &grid.values))
        .collect();
    let rss = (0..grid.len())
        .map(|j| per_unit.iter().map(|u| u[j]).sum::<Option<f64>>())
        .collect();
    RssProfile { grid: grid.clone(), rss }
}

/// Common threshold minimising the summed CCE residual sum of squares.
pub fn fit_pooled_threshold(
    panel: &PanelDataset,
    proj: &Projector,
    grid: &GammaGrid,
    vcov: VcovKind,
) -> Result<PooledFit> {
    let profile = pooled_rss_profile(panel, proj, grid);
    let best = profile.argmin().ok_or_else(|| {
        Error::NoFeasibleGamma(format!(
            "every one of {} common grid points leaves some unit unidentified",
            grid.len()
        ))
    })?;
    if profile.n_skipped() > 0 {
        log::info!(
            "pooled search skipped {} of {} grid points where some unit lost identification",
            profile.n_skipped(),
            grid.len()
        );
    }
    let gamma = grid.values[best];
    let unit_fits: Vec<UnitFit> = (0..panel.n_units())
        .into_par_iter()
        .map(|i| {
            let u = panel.unit(i);
            cce_fit_given_gamma(u.x, &u.y, &u.q, gamma, proj, u.selection, u.direction, vcov)
        })
        .collect::<Result<_>>()?;
    let thetas: Vec<DVector<f64>> = unit_fits.iter().map(|f| f.theta.clone()).collect();
    let (theta_mg, sigma_mg) = mean_group(&thetas)?;
    let total_rss = unit_fits.iter().map(|f| f.rss).sum();
    Ok(PooledFit { gamma, unit_fits, theta_mg, sigma_mg, total_rss, profile })
}
