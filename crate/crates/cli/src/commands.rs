//! Subcommand bodies. Each returns its results block, a grid description and a CSV table.

use std::fs::File;
use std::io::BufReader;

use cce_threshold::lr::unit_lr_profile_plugin;
use cce_threshold::montecarlo::{summarize_records, write_records_csv};
use cce_threshold::{
    cce_projector, fit_all_units, fit_pooled_threshold, load_panel, mbic_heterogeneous, mbic_semi, pooled_lr_profile,
    run_monte_carlo, select_model, simulate, summarize, test_pooled_linearity, test_unit_linearity, unit_lr_profile,
    write_panel, Error, GammaGrid, IngestionReport, LrProfile, McConfig, MbicScore, ModelChoice, NullFit, PanelDataset,
    SummaryStats, TestOptions, TestReport, UnitFit, VcovKind,
};
use log::info;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::failure::Failure;
use crate::settings::{Eta2Choice, RunConfig};

pub struct Outcome {
    pub results: Value,
    pub grid: Value,
    pub ingestion: Option<IngestionReport>,
    pub csv: Vec<u8>,
    /// Some units or replications failed while others succeeded.
    pub partial: bool,
}

fn table(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::usage(format!("csv output: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Failure::usage(format!("csv output: {e}")))
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn load(cfg: &RunConfig, q_col: &str) -> Result<(PanelDataset, IngestionReport), Failure> {
    let path = cfg.data.as_deref().expect("data path resolved");
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    info!("reading {path}");
    let (panel, report) = load_panel(BufReader::new(file), &cfg.schema(q_col))?;
    info!("panel with {} units and {} periods", report.n_units, report.n_periods);
    Ok((panel, report))
}

fn grid_info(g: &GammaGrid) -> Value {
    json!({
        "source": g.source,
        "n_points": g.len(),
        "min": g.values.first(),
        "max": g.values.last(),
        "n_distinct": g.n_distinct,
        "trim_lo": g.trim_lo,
        "trim_hi": g.trim_hi,
        "thinned_from": g.thinned_from,
    })
}

fn per_unit_grid(cfg: &RunConfig) -> Value {
    json!({ "kind": "per_unit", "trim": cfg.trim, "max_points": cfg.grid_points })
}

fn coef_names(panel: &PanelDataset) -> Vec<String> {
    let names = panel.regressor_names();
    let mut out = names.to_vec();
    out.extend(
        names.iter().zip(panel.selection()).filter(|(_, s)| **s).map(|(n, _)| format!("delta_{n}")),
    );
    out
}

fn coefficients(names: &[String], est: &[f64], se: &[f64]) -> Value {
    Value::Array(
        names
            .iter()
            .zip(est)
            .zip(se)
            .map(|((n, e), s)| json!({ "name": n, "estimate": e, "std_error": s }))
            .collect(),
    )
}

fn unit_json(label: &str, fit: &UnitFit, names: &[String]) -> Value {
    json!({
        "unit": label,
        "gamma": fit.gamma,
        "coefficients": coefficients(names, fit.theta.as_slice(), fit.std_errors().as_slice()),
        "rss": fit.rss,
        "sigma2_eps": fit.sigma2_eps,
        "n_obs": fit.n_obs,
        "n_firing": fit.n_firing,
    })
}

fn error_json(label: &str, e: &Error) -> Value {
    json!({ "unit": label, "error": Failure::core(e) })
}

/// Seven summary statistics per coefficient across units, one row per coefficient.
fn summary_rows(names: &[String], fits: &[&UnitFit], with_gamma: bool) -> Vec<(String, SummaryStats)> {
    let mut rows = Vec::new();
    for (j, n) in names.iter().enumerate() {
        let v: Vec<f64> = fits.iter().map(|f| f.theta[j]).collect();
        if let Some(s) = summarize(&v) {
            rows.push((n.clone(), s));
        }
    }
    if with_gamma {
        let g: Vec<f64> = fits.iter().map(|f| f.gamma).collect();
        if let Some(s) = summarize(&g) {
            rows.push(("gamma".into(), s));
        }
    }
    rows
}

fn summary_json(rows: &[(String, SummaryStats)]) -> Value {
    Value::Array(
        rows.iter()
            .map(|(n, s)| {
                let mut m = serde_json::Map::new();
                m.insert("coefficient".into(), json!(n));
                for (label, v) in SummaryStats::LABELS.iter().zip(s.as_array()) {
                    m.insert((*label).into(), json!(v));
                }
                Value::Object(m)
            })
            .collect(),
    )
}

fn first_error<T>(results: &[cce_threshold::Result<T>]) -> Option<&Error> {
    results.iter().find_map(|r| r.as_ref().err())
}

pub fn estimate_het(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let (panel, ingestion) = load(cfg, &cfg.q_col)?;
    let proj = cce_projector(&panel, cfg.intercept_factor)?;
    info!("estimating {} unit-specific thresholds", panel.n_units());
    let searches = fit_all_units(&panel, &proj, &cfg.estimation());
    let names = coef_names(&panel);
    let labels = panel.unit_labels();
    let mut units = Vec::new();
    let mut fits = Vec::new();
    for (i, s) in searches.iter().enumerate() {
        match s {
            Ok(s) => {
                let mut u = unit_json(&labels[i], &s.fit, &names);
                u["grid"] = grid_info(&s.profile.grid);
                units.push(u);
                fits.push(&s.fit);
            }
            Err(e) => units.push(error_json(&labels[i], e)),
        }
    }
    if fits.is_empty() {
        return Err(Failure::core(first_error(&searches).expect("no unit fitted")));
    }
    let rows = summary_rows(&names, &fits, true);
    let csv = table(
        &["coefficient", "mean", "sd", "q1", "median", "q3", "min", "max"],
        rows.iter().map(|(n, s)| std::iter::once(n.clone()).chain(s.as_array().map(num)).collect()).collect(),
    )?;
    Ok(Outcome {
        results: json!({
            "n_units": panel.n_units(),
            "n_fitted": fits.len(),
            "units": units,
            "summary": summary_json(&rows),
        }),
        grid: per_unit_grid(cfg),
        ingestion: Some(ingestion),
        csv,
        partial: fits.len() < panel.n_units(),
    })
}

pub fn estimate_semi(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let (panel, ingestion) = load(cfg, &cfg.q_col)?;
    let proj = cce_projector(&panel, cfg.intercept_factor)?;
    let grid = cfg.estimation().pooled_grid(&panel)?;
    info!("searching a common threshold over {} grid points", grid.len());
    let pooled = fit_pooled_threshold(&panel, &proj, &grid, cfg.vcov)?;
    let names = coef_names(&panel);
    let labels = panel.unit_labels();
    let mg_se = pooled.mg_std_errors();
    let fits: Vec<&UnitFit> = pooled.unit_fits.iter().collect();
    let rows = summary_rows(&names, &fits, false);
    let units: Vec<Value> = pooled.unit_fits.iter().zip(labels).map(|(f, l)| unit_json(l, f, &names)).collect();

    let mut csv_rows = vec![{
        let mut r = vec!["gamma".to_string(), num(pooled.gamma), String::new()];
        r.extend(std::iter::repeat_n(String::new(), 7));
        r
    }];
    for (j, (n, s)) in rows.iter().enumerate() {
        let mut r = vec![n.clone(), num(pooled.theta_mg[j]), num(mg_se[j])];
        r.extend(s.as_array().map(num));
        csv_rows.push(r);
    }
    let csv = table(
        &["coefficient", "estimate", "std_error", "mean", "sd", "q1", "median", "q3", "min", "max"],
        csv_rows,
    )?;
    Ok(Outcome {
        results: json!({
            "gamma": pooled.gamma,
            "sigma2_eps": pooled.sigma2_eps(),
            "total_rss": pooled.total_rss,
            "mean_group": coefficients(&names, pooled.theta_mg.as_slice(), mg_se.as_slice()),
            "mean_group_vcov": pooled.sigma_mg.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
            "summary": summary_json(&rows),
            "units": units,
        }),
        grid: grid_info(&grid),
        ingestion: Some(ingestion),
        csv,
        partial: false,
    })
}

fn lr_json(p: &LrProfile) -> Value {
    json!({
        "gamma_hat": p.gamma_hat,
        "sigma2_eps": p.sigma2_eps,
        "eta2": p.eta2,
        "eta2_source": p.eta2_source,
        "level": p.level,
        "critical_value": p.critical_value,
        "cutoff": p.cutoff(),
        "confidence_set": p.confidence_set,
        "n_in_set": p.n_in_set,
        "disconnected": p.is_disconnected(),
        "grid": grid_info(&p.grid),
        "profile": p.grid.values.iter().zip(&p.lr_values)
            .map(|(g, v)| json!({ "gamma": g, "lr": v }))
            .collect::<Vec<_>>(),
    })
}

fn lr_row(scope: &str, unit: &str, p: &LrProfile) -> Vec<String> {
    let lo = p.confidence_set.first().map(|r| r.0);
    let hi = p.confidence_set.last().map(|r| r.1);
    vec![
        scope.into(),
        unit.into(),
        num(p.gamma_hat),
        opt_num(lo),
        opt_num(hi),
        p.confidence_set.len().to_string(),
        p.n_in_set.to_string(),
        num(p.eta2),
        num(p.cutoff()),
    ]
}

pub fn ci(cfg: &RunConfig) -> Result<Outcome, Failure> {
    if cfg.scope.pooled() && cfg.eta2 == Eta2Choice::Plugin {
        return Err(Failure::usage("the eta2 plug-in is available for per-unit profiles only; use --scope unit".into()));
    }
    let (panel, ingestion) = load(cfg, &cfg.q_col)?;
    let proj = cce_projector(&panel, cfg.intercept_factor)?;
    let labels = panel.unit_labels();
    let dir = panel.direction();
    let mut rows = Vec::new();
    let mut results = serde_json::Map::new();
    let mut grid = serde_json::Map::new();
    let mut partial = false;

    if cfg.scope.units() {
        let searches = fit_all_units(&panel, &proj, &cfg.estimation());
        let mut units = Vec::new();
        let mut n_ok = 0;
        for (i, s) in searches.iter().enumerate() {
            let prof = s.as_ref().map_err(Failure::core).and_then(|s| {
                let p = match cfg.eta2 {
                    Eta2Choice::Value(v) => unit_lr_profile(s, cfg.level, v, dir),
                    Eta2Choice::Plugin => unit_lr_profile_plugin(&panel.unit(i), s, &proj, cfg.level),
                };
                p.map_err(|e| Failure::core(&e))
            });
            match prof {
                Ok(p) => {
                    n_ok += 1;
                    rows.push(lr_row("unit", &labels[i], &p));
                    let mut v = lr_json(&p);
                    v["unit"] = json!(labels[i]);
                    units.push(v);
                }
                Err(f) => units.push(json!({ "unit": labels[i], "error": f })),
            }
        }
        if n_ok == 0 {
            return Err(Failure::core(first_error(&searches).unwrap_or(&Error::NoFeasibleGamma("no unit profile".into()))));
        }
        partial = n_ok < panel.n_units();
        results.insert("units".into(), Value::Array(units));
        grid.insert("units".into(), per_unit_grid(cfg));
    }
    if cfg.scope.pooled() {
        let g = cfg.estimation().pooled_grid(&panel)?;
        let pooled = fit_pooled_threshold(&panel, &proj, &g, cfg.vcov)?;
        let eta2 = match cfg.eta2 {
            Eta2Choice::Value(v) => v,
            Eta2Choice::Plugin => unreachable!("rejected above"),
        };
        let p = pooled_lr_profile(&pooled, cfg.level, eta2, dir)?;
        rows.push(lr_row("pooled", "", &p));
        results.insert("pooled".into(), lr_json(&p));
        grid.insert("pooled".into(), grid_info(&g));
    }
    let csv = table(
        &["scope", "unit", "gamma_hat", "set_lower", "set_upper", "n_runs", "n_in_set", "eta2", "cutoff"],
        rows,
    )?;
    Ok(Outcome { results: Value::Object(results), grid: Value::Object(grid), ingestion: Some(ingestion), csv, partial })
}

fn test_json(r: &TestReport, level: f64) -> Value {
    json!({
        "statistic": r.statistic,
        "gamma_at_sup": r.gamma_at_sup,
        "p_value": r.p_value,
        "rejected": r.rejects(level),
        "n_boot": r.n_boot,
        "n_dropped": r.n_dropped,
        "seed": r.seed,
        "status": r.status,
        "lag": r.lag,
        "grid": grid_info(&r.grid),
        "per_gamma_wald": r.grid.values.iter().zip(&r.per_gamma_wald)
            .map(|(g, w)| json!({ "gamma": g, "wald": w }))
            .collect::<Vec<_>>(),
    })
}

fn test_row(scope: &str, unit: &str, r: &TestReport, level: f64) -> Vec<String> {
    vec![
        scope.into(),
        unit.into(),
        num(r.statistic),
        num(r.gamma_at_sup),
        opt_num(r.p_value),
        r.rejects(level).map(|b| b.to_string()).unwrap_or_default(),
        r.n_boot.to_string(),
        r.n_dropped.to_string(),
        format!("{:?}", r.status).to_lowercase(),
    ]
}

pub fn test_linearity(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let (panel, ingestion) = load(cfg, &cfg.q_col)?;
    let proj = cce_projector(&panel, cfg.intercept_factor)?;
    let null = NullFit::new(&panel, &proj);
    let lag = match cfg.vcov {
        VcovKind::Hac { bandwidth } => bandwidth,
        VcovKind::Hc => None,
    };
    let opts = TestOptions { n_boot: cfg.boot, seed: cfg.seed.expect("seed resolved"), lag };
    let est = cfg.estimation();
    let labels = panel.unit_labels();
    let mut rows = Vec::new();
    let mut results = serde_json::Map::new();
    let mut grid = serde_json::Map::new();
    let mut partial = false;

    if cfg.scope.units() {
        info!("testing linearity in {} units with {} bootstrap replicates", panel.n_units(), cfg.boot);
        let reports: Vec<cce_threshold::Result<TestReport>> = (0..panel.n_units())
            .into_par_iter()
            .map(|i| {
                let g = est.unit_grid(&panel, i)?;
                test_unit_linearity(&panel, &proj, &null, i, &g, &opts)
            })
            .collect();
        let mut units = Vec::new();
        let (mut tested, mut rejected) = (0usize, 0usize);
        for (i, r) in reports.iter().enumerate() {
            match r {
                Ok(r) => {
                    tested += 1;
                    rejected += r.rejects(cfg.level).unwrap_or(false) as usize;
                    rows.push(test_row("unit", &labels[i], r, cfg.level));
                    let mut v = test_json(r, cfg.level);
                    v["unit"] = json!(labels[i]);
                    units.push(v);
                }
                Err(e) => units.push(error_json(&labels[i], e)),
            }
        }
        if tested == 0 {
            return Err(Failure::core(first_error(&reports).expect("no unit tested")));
        }
        partial = tested < panel.n_units();
        results.insert("units".into(), Value::Array(units));
        results.insert("n_tested".into(), json!(tested));
        results.insert("rejection_percentage".into(), json!(100.0 * rejected as f64 / tested as f64));
        grid.insert("units".into(), per_unit_grid(cfg));
    }
    if cfg.scope.pooled() {
        let g = est.pooled_grid(&panel)?;
        info!("pooled test over {} grid points", g.len());
        let r = test_pooled_linearity(&panel, &proj, &null, &g, &opts)?;
        rows.push(test_row("pooled", "", &r, cfg.level));
        results.insert("pooled".into(), test_json(&r, cfg.level));
        grid.insert("pooled".into(), grid_info(&g));
    }
    let csv = table(
        &["scope", "unit", "statistic", "gamma_at_sup", "p_value", "rejected", "n_boot", "n_dropped", "status"],
        rows,
    )?;
    Ok(Outcome { results: Value::Object(results), grid: Value::Object(grid), ingestion: Some(ingestion), csv, partial })
}

fn score_row(model: &str, q: &str, s: &MbicScore, selected: bool) -> Vec<String> {
    vec![
        model.into(),
        q.into(),
        num(s.sigma2),
        s.k1.to_string(),
        s.k2.to_string(),
        num(s.penalty1),
        num(s.penalty2),
        num(s.score),
        selected.to_string(),
    ]
}

pub fn select(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let (het_panel, ingestion) = load(cfg, &cfg.q_col)?;
    let q_semi = cfg.q_col_semi.clone().unwrap_or_else(|| cfg.q_col.clone());
    let semi_panel = if q_semi == cfg.q_col { het_panel.clone() } else { load(cfg, &q_semi)?.0 };
    let est = cfg.estimation();
    let (n, t, k, r) = (het_panel.n_units(), het_panel.n_periods(), het_panel.k(), het_panel.r());

    let proj = cce_projector(&het_panel, cfg.intercept_factor)?;
    let searches = fit_all_units(&het_panel, &proj, &est);
    if let Some((i, e)) = searches.iter().enumerate().find_map(|(i, s)| s.as_ref().err().map(|e| (i, e))) {
        let mut f = Failure::core(e);
        f.message = format!("unit '{}': {}", het_panel.unit_labels()[i], f.message);
        return Err(f);
    }
    let fits: Vec<UnitFit> = searches.into_iter().map(|s| s.expect("checked").fit).collect();
    let het = mbic_heterogeneous(&fits, n, t, k, r)?;

    let proj_semi = cce_projector(&semi_panel, cfg.intercept_factor)?;
    let grid = est.pooled_grid(&semi_panel)?;
    let pooled = fit_pooled_threshold(&semi_panel, &proj_semi, &grid, cfg.vcov)?;
    let semi = mbic_semi(&pooled, n, t, k, r)?;
    let sel = select_model(&het, &semi);
    let het_chosen = sel.choice == ModelChoice::FullyHeterogeneous;

    let csv = table(
        &["model", "q_col", "sigma2", "k1", "k2", "penalty1", "penalty2", "score", "selected"],
        vec![
            score_row("fully_heterogeneous", &cfg.q_col, &het, het_chosen),
            score_row("semi_homogeneous", &q_semi, &semi, !het_chosen),
        ],
    )?;
    Ok(Outcome {
        results: json!({
            "fully_heterogeneous": { "q_col": cfg.q_col, "score": het },
            "semi_homogeneous": { "q_col": q_semi, "gamma": pooled.gamma, "score": semi },
            "choice": sel.choice,
            "margin": sel.margin,
            "tie": sel.tie,
        }),
        grid: json!({ "fully_heterogeneous": per_unit_grid(cfg), "semi_homogeneous": grid_info(&grid) }),
        ingestion: Some(ingestion),
        csv,
        partial: false,
    })
}

pub fn monte_carlo(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let mc = McConfig {
        dgp: cfg.dgp.clone().expect("dgp resolved"),
        replications: cfg.replications,
        seed: cfg.seed.expect("seed resolved"),
        estimation: cfg.estimation(),
        level: cfg.level,
        pooled: true,
        n_boot: cfg.boot,
        test_grid_points: cfg.grid_points.or(Some(50)),
    };
    info!("running {} replications", mc.replications);
    let results = run_monte_carlo(&mc);
    let summary = summarize_records(&results);
    if summary.n_failed == summary.n_replications {
        return Err(Failure::core(first_error(&results).expect("all replications failed")));
    }
    let records: Vec<Value> = results
        .iter()
        .enumerate()
        .map(|(rep, r)| match r {
            Ok(r) => serde_json::to_value(r).expect("record serializes"),
            Err(e) => json!({ "rep": rep, "error": Failure::core(e) }),
        })
        .collect();
    let mut csv = Vec::new();
    write_records_csv(&results, &mut csv)?;
    Ok(Outcome {
        results: json!({ "mc": mc, "summary": summary, "records": records }),
        grid: json!({
            "kind": "per_replication",
            "trim": cfg.trim,
            "max_points": cfg.grid_points,
            "test_max_points": mc.test_grid_points,
        }),
        ingestion: None,
        csv,
        partial: summary.n_failed > 0,
    })
}

/// Simulated panel as CSV plus the truth block for the optional JSON report.
pub fn simulate_panel(cfg: &RunConfig) -> Result<(Vec<u8>, Value, IngestionReport), Failure> {
    let dgp = cfg.dgp.as_ref().expect("dgp resolved");
    let (panel, truth) = simulate(dgp)?;
    let mut buf = Vec::new();
    write_panel(&panel, &mut buf)?;
    Ok((buf, json!({ "dgp": dgp, "truth": truth }), panel.report()))
}
