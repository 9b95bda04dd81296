mod common;

use cce_threshold::threshold::build_unit_grid;
use cce_threshold::*;
use nalgebra::DMatrix;

use common::*;

fn cfg(n: usize, t: usize, seed: u64) -> DgpConfig {
    DgpConfig { n_units: n, n_periods: t, seed, ..DgpConfig::default() }
}

#[test]
fn cross_sectional_average_matches_loop() {
    let (panel, _) = simulate(&DgpConfig { n_units: 5, n_periods: 20, ..cfg(5, 20, 1) }).unwrap();
    let xs: Vec<DMatrix<f64>> = (0..5).map(|i| panel.x(i).clone()).collect();
    let got = cross_sectional_average(&panel, false);
    assert!((got - column_mean_oracle(&xs)).amax() <= 1e-12);
    let with_one = cross_sectional_average(&panel, true);
    assert!(with_one.column(0).iter().all(|v| *v == 1.0));
}

#[test]
fn search_matches_exhaustive_oracle() {
    for seed in 0..10u64 {
        let (panel, _) = simulate(&cfg(4, 30 + 3 * seed as usize, seed)).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let m = dense_annihilator(&cross_sectional_average(&panel, false));
        for i in 0..panel.n_units() {
            let u = panel.unit(i);
            let grid = build_unit_grid(&panel, i, 0.1).unwrap();
            let got = fit_unit_threshold(&u, &proj, &grid, VcovKind::Hc).unwrap();
            let (g, r) = exhaustive_search(u.x, &u.y, &u.q, &m, u.selection, true, 0.1, 4).unwrap();
            assert_eq!(got.fit.gamma, g, "seed {seed} unit {i}");
            assert!((got.fit.rss - r).abs() <= 1e-9, "seed {seed} unit {i}: {} vs {r}", got.fit.rss);
        }
    }
}

#[test]
fn single_unit_reduces_to_series_threshold_regression() {
    let (panel, _) = simulate(&cfg(1, 80, 21)).unwrap();
    // with one unit the averages equal its regressors, so work with the identity projector instead
    let t = panel.n_periods();
    let proj = Projector::identity(t);
    let u = panel.unit(0);
    let grid = build_grid(u.q.as_slice(), 0.1).unwrap();
    let got = fit_unit_threshold(&u, &proj, &grid, VcovKind::Hc).unwrap();
    let m = DMatrix::identity(t, t);
    let (g, r) = exhaustive_search(u.x, &u.y, &u.q, &m, u.selection, true, 0.1, 4).unwrap();
    assert_eq!(got.fit.gamma, g);
    assert!((got.fit.rss - r).abs() <= 1e-9);
}

#[test]
fn empirical_scale_batch() {
    let (panel, _) = simulate(&DgpConfig { n_units: 45, n_periods: 50, seed: 8, ..DgpConfig::default() }).unwrap();
    let proj = cce_projector(&panel, true).unwrap();
    let fits = fit_all_units(&panel, &proj, &EstimationOptions::default());
    assert_eq!(fits.len(), 45);
    assert!(fits.iter().all(|f| f.is_ok()));
}

#[test]
fn pooled_beats_unit_median_error() {
    let mut pooled_err = Vec::new();
    let mut unit_err = Vec::new();
    for rep in 0..20u64 {
        let (panel, truth) = simulate(&cfg(20, 100, 100 + rep)).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let opts = EstimationOptions::default();
        let grid = opts.pooled_grid(&panel).unwrap();
        let pooled = fit_pooled_threshold(&panel, &proj, &grid, VcovKind::Hc).unwrap();
        pooled_err.push((pooled.gamma - truth.gamma[0]).abs());
        let errs: Vec<f64> = fit_all_units(&panel, &proj, &opts)
            .into_iter()
            .map(|f| (f.unwrap().fit.gamma - truth.gamma[0]).abs())
            .collect();
        unit_err.push(median(&errs));
    }
    assert!(median(&pooled_err) < median(&unit_err));
}

#[test]
fn ols_recovers_linear_panel_without_factors() {
    let cfg = DgpConfig {
        m_factors: 0,
        loading_low: 0.0,
        loading_high: 0.0,
        c0: vec![0.0],
        alpha: PerUnit::Common(0.0),
        beta: vec![1.5, -0.5],
        ..cfg(6, 200, 31)
    };
    let (panel, truth) = simulate(&cfg).unwrap();
    let proj = Projector::identity(200);
    for i in 0..6 {
        let u = panel.unit(i);
        let fit = cce_fit_given_gamma(u.x, &u.y, &u.q, 0.0, &proj, u.selection, u.direction, VcovKind::Hc).unwrap();
        let se = fit.std_errors();
        for j in 0..2 {
            assert!((fit.theta[j] - truth.beta[i][j]).abs() < 3.0 * se[j], "unit {i} coef {j}");
        }
    }
}

#[test]
fn pooled_delta_near_truth_without_factors() {
    let cfg = DgpConfig {
        m_factors: 0,
        loading_low: 0.0,
        loading_high: 0.0,
        c0: vec![0.8],
        alpha: PerUnit::Common(0.0),
        ..cfg(20, 200, 41)
    };
    let (panel, truth) = simulate(&cfg).unwrap();
    let proj = cce_projector(&panel, false).unwrap();
    let grid = build_pooled_grid(&panel, 0.1).unwrap();
    let j = grid.step_index(0.0, Direction::LowRegimeLeq).unwrap();
    let pd = pooled_delta(&panel, &proj, grid.values[j]).unwrap();
    assert!((pd.delta[0] - truth.delta[0][0]).abs() < 3.0 * pd.std_errors[0]);
}

#[test]
fn noiseless_strong_threshold_lr_is_large_off_truth() {
    let cfg = DgpConfig {
        sigma2_eps: PerUnit::Common(0.0),
        m_factors: 0,
        alpha: PerUnit::Common(0.0),
        c0: vec![2.0],
        ..cfg(3, 100, 51)
    };
    let (panel, _) = simulate(&cfg).unwrap();
    // tiny noise so the variance estimate is positive
    let y = panel.y() + DMatrix::from_fn(100, 3, |s, i| 1e-3 * (((s * 31 + i * 7) % 13) as f64 - 6.0));
    let panel = panel.with_outcome(y).unwrap();
    let proj = Projector::identity(100);
    let u = panel.unit(0);
    let grid = build_grid(u.q.as_slice(), 0.1).unwrap();
    let s = fit_unit_threshold(&u, &proj, &grid, VcovKind::Hc).unwrap();
    let prof = lr::unit_lr_profile(&s, 0.01, 1.0, Direction::LowRegimeLeq).unwrap();
    let c = lr_critical_value(0.01).unwrap();
    let true_j = grid.step_index(0.0, Direction::LowRegimeLeq).unwrap();
    for (j, v) in prof.lr_values.iter().enumerate() {
        if j != true_j {
            assert!(v.unwrap() > c, "grid point {j}: {v:?}");
        }
    }
}

#[test]
fn disjoint_supports_leave_units_unidentified() {
    let (panel, _) = simulate(&cfg(2, 40, 61)).unwrap();
    let shifted = DMatrix::from_fn(40, 2, |s, i| panel.q()[(s, i)] + if i == 1 { 1e3 } else { 0.0 });
    let p2 = panel.with_threshold_variable(shifted).unwrap();
    let counts = regime_counts(&p2, &[0.0]);
    assert!(counts.iter().any(|(lo, hi)| *lo == 0 || *hi == 0));
    assert!(matches!(build_pooled_grid(&p2, 0.1), Err(Error::DisjointSupport { .. })));
}
