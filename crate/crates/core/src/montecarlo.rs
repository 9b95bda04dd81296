//! Replication loop over simulated panels: threshold errors, confidence-set
//! coverage, linearity-test rejections and model selection per replication.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{derive_seed, simulate, DgpConfig};
use crate::error::Result;
use crate::linearity::{test_pooled_linearity, NullFit, TestOptions};
use crate::lr::{pooled_lr_profile, unit_lr_profile};
use crate::mbic::{mbic_heterogeneous, mbic_semi, select_model, ModelChoice};
use crate::panel::cce_projector;
use crate::summary::{median, summarize};
use crate::threshold::{fit_all_units, fit_pooled_threshold, EstimationOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub dgp: DgpConfig,
    pub replications: usize,
    /// Replication `r` simulates with seed `derive_seed(seed, r)`.
    pub seed: u64,
    pub estimation: EstimationOptions,
    /// Level `a` for confidence sets (coverage `1 - a`) and tests.
    pub level: f64,
    /// Run the common-threshold fit and the model selection.
    pub pooled: bool,
    /// Bootstrap replicates for the pooled linearity test; 0 skips the test.
    pub n_boot: usize,
    /// Thin the test grid to at most this many points.
    pub test_grid_points: Option<usize>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            replications: 100,
            seed: 0,
            estimation: EstimationOptions::default(),
            level: 0.05,
            pooled: true,
            n_boot: 0,
            test_grid_points: Some(50),
        }
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub n_units_fitted: usize,
    pub n_unit_failures: usize,
    /// Median over units of `|gamma_hat_i - gamma_i|`.
    pub median_abs_err: f64,
    pub mean_abs_err: f64,
    /// Share of units whose LR confidence set contains the true threshold.
    pub unit_coverage: f64,
    pub pooled_gamma: Option<f64>,
    /// `|gamma_hat - gamma_1|`, meaningful when the truth is common.
    pub pooled_abs_err: Option<f64>,
    pub pooled_covered: Option<bool>,
    pub mg_theta: Vec<f64>,
    pub mg_se: Vec<f64>,
    pub theta_mean: Vec<f64>,
    pub supw: Option<f64>,
    pub supw_p_value: Option<f64>,
    pub rejected: Option<bool>,
    pub mbic_het: Option<f64>,
    pub mbic_semi: Option<f64>,
    pub selected: Option<ModelChoice>,
}

/// Runs replication `rep` of `cfg`.
pub fn run_replication(cfg: &McConfig, rep: usize) -> Result<ReplicationRecord> {
    let seed = derive_seed(cfg.seed, rep as u64);
    let dgp = DgpConfig { seed, ..cfg.dgp.clone() };
    let (panel, truth) = simulate(&dgp)?;
    let proj = cce_projector(&panel, cfg.estimation.intercept_factor)?;
    let direction = panel.direction();

    let searches = fit_all_units(&panel, &proj, &cfg.estimation);
    let mut errs = Vec::new();
    let mut covered = 0usize;
    let mut fits = Vec::new();
    for (i, s) in searches.iter().enumerate() {
        if let Ok(s) = s {
            errs.push((s.fit.gamma - truth.gamma[i]).abs());
            if unit_lr_profile(s, cfg.level, 1.0, direction)?.covers(truth.gamma[i]) {
                covered += 1;
            }
            fits.push(s.fit.clone());
        }
    }
    let n_ok = errs.len();
    let mut record = ReplicationRecord {
        rep,
        seed,
        n_units_fitted: n_ok,
        n_unit_failures: panel.n_units() - n_ok,
        median_abs_err: median(&errs).unwrap_or(f64::NAN),
        mean_abs_err: summarize(&errs).map_or(f64::NAN, |s| s.mean),
        unit_coverage: if n_ok > 0 { covered as f64 / n_ok as f64 } else { f64::NAN },
        pooled_gamma: None,
        pooled_abs_err: None,
        pooled_covered: None,
        mg_theta: Vec::new(),
        mg_se: Vec::new(),
        theta_mean: truth.theta_mean.clone(),
        supw: None,
        supw_p_value: None,
        rejected: None,
        mbic_het: None,
        mbic_semi: None,
        selected: None,
    };

    let (n, t, k, r) = (panel.n_units(), panel.n_periods(), panel.k(), panel.r());
    if cfg.pooled {
        let grid = cfg.estimation.pooled_grid(&panel)?;
        let pooled = fit_pooled_threshold(&panel, &proj, &grid, cfg.estimation.vcov)?;
        record.pooled_gamma = Some(pooled.gamma);
        record.pooled_abs_err = Some((pooled.gamma - truth.gamma[0]).abs());
        record.pooled_covered = Some(pooled_lr_profile(&pooled, cfg.level, 1.0, direction)?.covers(truth.gamma[0]));
        record.mg_theta = pooled.theta_mg.iter().copied().collect();
        record.mg_se = pooled.mg_std_errors().iter().copied().collect();
        if n_ok == n {
            let het = mbic_heterogeneous(&fits, n, t, k, r)?;
            let semi = mbic_semi(&pooled, n, t, k, r)?;
            record.mbic_het = Some(het.score);
            record.mbic_semi = Some(semi.score);
            record.selected = Some(select_model(&het, &semi).choice);
        }
    }

    if cfg.n_boot > 0 {
        let mut grid = crate::threshold::build_pooled_grid(&panel, cfg.estimation.trim)?;
        if let Some(m) = cfg.test_grid_points {
            grid = grid.thin(m);
        }
        let null = NullFit::new(&panel, &proj);
        let opts = TestOptions { n_boot: cfg.n_boot, seed: derive_seed(seed, u64::MAX), lag: None };
        let report = test_pooled_linearity(&panel, &proj, &null, &grid, &opts)?;
        record.supw = Some(report.statistic);
        record.supw_p_value = report.p_value;
        record.rejected = report.rejects(cfg.level);
    }
    Ok(record)
}

/// Runs every replication; failures are kept in place.
pub fn run_monte_carlo(cfg: &McConfig) -> Vec<Result<ReplicationRecord>> {
    (0..cfg.replications).into_par_iter().map(|rep| run_replication(cfg, rep)).collect()
}

/// Aggregates over successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub n_replications: usize,
    pub n_failed: usize,
    pub median_abs_err: Option<f64>,
    pub unit_coverage: Option<f64>,
    pub pooled_median_abs_err: Option<f64>,
    pub pooled_coverage: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub heterogeneous_selected: Option<f64>,
}

fn rate(values: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for v in values {
        n += 1;
        hit += v as usize;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

pub fn summarize_records(results: &[Result<ReplicationRecord>]) -> McSummary {
    let ok: Vec<&ReplicationRecord> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let med: Vec<f64> = ok.iter().map(|r| r.median_abs_err).collect();
    let pooled: Vec<f64> = ok.iter().filter_map(|r| r.pooled_abs_err).collect();
    let cov: Vec<f64> = ok.iter().map(|r| r.unit_coverage).filter(|v| v.is_finite()).collect();
    McSummary {
        n_replications: results.len(),
        n_failed: results.len() - ok.len(),
        median_abs_err: median(&med),
        unit_coverage: summarize(&cov).map(|s| s.mean),
        pooled_median_abs_err: median(&pooled),
        pooled_coverage: rate(ok.iter().filter_map(|r| r.pooled_covered)),
        rejection_rate: rate(ok.iter().filter_map(|r| r.rejected)),
        heterogeneous_selected: rate(ok.iter().filter_map(|r| r.selected.map(|c| c == ModelChoice::FullyHeterogeneous))),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per replication; failed replications carry only `rep` and `error`.
pub fn write_records_csv<W: Write>(results: &[Result<ReplicationRecord>], sink: W) -> Result<()> {
    let p = results
        .iter()
        .filter_map(|r| r.as_ref().ok())
        .map(|r| r.theta_mean.len())
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = [
        "rep", "seed", "n_units_fitted", "n_unit_failures", "median_abs_err", "mean_abs_err", "unit_coverage",
        "pooled_gamma", "pooled_abs_err", "pooled_covered", "supw", "supw_p_value", "rejected", "mbic_het",
        "mbic_semi", "selected",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for j in 0..p {
        header.push(format!("theta_true_{}", j + 1));
        header.push(format!("mg_theta_{}", j + 1));
        header.push(format!("mg_se_{}", j + 1));
    }
    header.push("error".into());
    w.write_record(&header)?;
    for (rep, res) in results.iter().enumerate() {
        let mut row = vec![String::new(); header.len()];
        row[0] = rep.to_string();
        match res {
            Ok(r) => {
                let sel = r.selected.map(|c| match c {
                    ModelChoice::FullyHeterogeneous => "heterogeneous",
                    ModelChoice::SemiHomogeneous => "semi_homogeneous",
                });
                let fixed = [
                    r.seed.to_string(),
                    r.n_units_fitted.to_string(),
                    r.n_unit_failures.to_string(),
                    r.median_abs_err.to_string(),
                    r.mean_abs_err.to_string(),
                    r.unit_coverage.to_string(),
                    opt(r.pooled_gamma),
                    opt(r.pooled_abs_err),
                    r.pooled_covered.map(|b| b.to_string()).unwrap_or_default(),
                    opt(r.supw),
                    opt(r.supw_p_value),
                    r.rejected.map(|b| b.to_string()).unwrap_or_default(),
                    opt(r.mbic_het),
                    opt(r.mbic_semi),
                    sel.unwrap_or_default().to_string(),
                ];
                for (c, v) in fixed.into_iter().enumerate() {
                    row[c + 1] = v;
                }
                for j in 0..p {
                    let base = 16 + 3 * j;
                    row[base] = opt(r.theta_mean.get(j).copied());
                    row[base + 1] = opt(r.mg_theta.get(j).copied());
                    row[base + 2] = opt(r.mg_se.get(j).copied());
                }
            }
            Err(e) => {
                let last = row.len() - 1;
                row[last] = e.to_string();
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> McConfig {
        McConfig {
            dgp: DgpConfig { n_units: 5, n_periods: 50, ..DgpConfig::default() },
            replications: 3,
            seed: 4,
            ..McConfig::default()
        }
    }

    #[test]
    fn replications_are_reproducible() {
        let a = run_monte_carlo(&tiny());
        let b = run_monte_carlo(&tiny());
        let ja: Vec<_> = a.iter().map(|r| serde_json::to_string(r.as_ref().unwrap()).unwrap()).collect();
        let jb: Vec<_> = b.iter().map(|r| serde_json::to_string(r.as_ref().unwrap()).unwrap()).collect();
        assert_eq!(ja, jb);
        assert_ne!(ja[0], ja[1]);
    }

    #[test]
    fn csv_has_one_row_per_replication() {
        let res = run_monte_carlo(&tiny());
        let mut buf = Vec::new();
        write_records_csv(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().contains("mg_se_3"));
        let s = summarize_records(&res);
        assert_eq!(s.n_replications, 3);
        assert_eq!(s.n_failed, 0);
        assert!(s.unit_coverage.unwrap() >= 0.0);
    }
}
