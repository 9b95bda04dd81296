mod common;

use cce_threshold::threshold::{build_unit_grid, rss_profile};
use cce_threshold::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn small_dgp() -> impl Strategy<Value = DgpConfig> {
    (2usize..7, 30usize..61, any::<u64>(), 0usize..3, prop::bool::ANY).prop_map(|(n, t, seed, m, geq)| DgpConfig {
        n_units: n,
        n_periods: t,
        m_factors: m,
        seed,
        direction: if geq { Direction::HighRegimeGeq } else { Direction::LowRegimeLeq },
        ..DgpConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projector_idempotent_and_annihilating(basis in matrix(12, 3), v in matrix(12, 2)) {
        let proj = make_projector(&basis).unwrap();
        let once = proj.apply(&v);
        let twice = proj.apply(&once);
        prop_assert!((&once - &twice).amax() <= 1e-10 * (1.0 + v.amax()));
        prop_assert!(proj.apply(&basis).norm() <= 1e-8 * basis.norm().max(1.0));
        let m = proj.matrix();
        prop_assert!((&m - m.transpose()).amax() <= 1e-12);
        for c in 0..2 {
            prop_assert!(once.column(c).norm() <= v.column(c).norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn average_ignores_unit_order(cfg in small_dgp(), rot in 1usize..6) {
        let (panel, _) = simulate(&cfg).unwrap();
        let n = panel.n_units();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let xs: Vec<DMatrix<f64>> = perm.iter().map(|&i| panel.x(i).clone()).collect();
        let y = DMatrix::from_fn(panel.n_periods(), n, |s, j| panel.y()[(s, perm[j])]);
        let q = DMatrix::from_fn(panel.n_periods(), n, |s, j| panel.q()[(s, perm[j])]);
        let shuffled = PanelDataset::new(y, xs, q, panel.selection().to_vec(), panel.direction()).unwrap();
        let a = cross_sectional_average(&panel, false);
        let b = cross_sectional_average(&shuffled, false);
        prop_assert!((a - b).amax() <= 1e-12);
    }

    #[test]
    fn regimes_nest(x in matrix(15, 2), q in prop::collection::vec(-2.0f64..2.0, 15), g1 in -2.0f64..2.0, d in 0.0f64..2.0) {
        let q = DVector::from_vec(q);
        let sel = [true, true];
        let lo = regime_split(&x, &q, g1, &sel, Direction::LowRegimeLeq);
        let hi = regime_split(&x, &q, g1 + d, &sel, Direction::LowRegimeLeq);
        for s in 0..15 {
            prop_assert!(!lo.indicator[s] || hi.indicator[s]);
            let row = lo.w_low.row(s);
            prop_assert!(row.iter().all(|v| *v == 0.0) || row == x.row(s));
        }
    }

    #[test]
    fn geq_mirrors_leq(x in matrix(15, 2), q in prop::collection::vec(-2.0f64..2.0, 15), g in -2.0f64..2.0) {
        prop_assume!(q.iter().all(|v| *v != g));
        let q = DVector::from_vec(q);
        let sel = [true, false];
        let a = regime_split(&x, &q, g, &sel, Direction::HighRegimeGeq);
        let b = regime_split(&x, &(-&q), -g, &sel, Direction::LowRegimeLeq);
        prop_assert_eq!(a.indicator, b.indicator);
        prop_assert_eq!(a.z, b.z);
    }

    #[test]
    fn argmin_and_lr_scale_free(cfg in small_dgp(), c in 0.01f64..100.0) {
        let (panel, _) = simulate(&cfg).unwrap();
        let scaled = panel.with_outcome(panel.y() * c).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let grid = build_unit_grid(&panel, 0, 0.1).unwrap();
        let a = fit_unit_threshold(&panel.unit(0), &proj, &grid, VcovKind::Hc).unwrap();
        let b = fit_unit_threshold(&scaled.unit(0), &proj, &grid, VcovKind::Hc).unwrap();
        prop_assert_eq!(a.fit.gamma, b.fit.gamma);
        prop_assert!((b.fit.rss - c * c * a.fit.rss).abs() <= 1e-8 * b.fit.rss.max(1e-300));
        let la = unit_lr_profile(&a, 0.05, 1.0, panel.direction()).unwrap();
        let lb = unit_lr_profile(&b, 0.05, 1.0, panel.direction()).unwrap();
        for (u, v) in la.lr_values.iter().zip(&lb.lr_values) {
            match (u, v) {
                (Some(u), Some(v)) => prop_assert!((u - v).abs() <= 1e-6 * (1.0 + u)),
                (None, None) => {}
                _ => prop_assert!(false, "skip pattern differs: {:?} vs {:?}", u, v),
            }
        }
    }

    #[test]
    fn sup_wald_scale_free(cfg in small_dgp(), c in 0.1f64..10.0) {
        let (panel, _) = simulate(&cfg).unwrap();
        let scaled = panel.with_outcome(panel.y() * c).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let grid = build_unit_grid(&panel, 0, 0.15).unwrap().thin(10);
        let a = sup_wald_unit(&panel.unit(0), 0, &proj, &grid, None).unwrap();
        let b = sup_wald_unit(&scaled.unit(0), 0, &proj, &grid, None).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() <= 1e-6 * (1.0 + a.statistic));
        prop_assert!(a.per_gamma_wald.iter().flatten().all(|w| *w >= 0.0));
        prop_assert!(a.grid.values.contains(&a.gamma_at_sup));
    }

    #[test]
    fn refining_grid_never_raises_minimum(cfg in small_dgp(), keep in 3usize..20) {
        let (panel, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let full = build_unit_grid(&panel, 0, 0.1).unwrap();
        let coarse = full.clone().thin(keep);
        let u = panel.unit(0);
        let a = fit_unit_threshold(&u, &proj, &full, VcovKind::Hc);
        let b = fit_unit_threshold(&u, &proj, &coarse, VcovKind::Hc);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert!(a.fit.rss <= b.fit.rss * (1.0 + 1e-12));
        }
    }

    #[test]
    fn rss_takes_at_most_t_plus_one_values(cfg in small_dgp()) {
        let (panel, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let u = panel.unit(0);
        let t = panel.n_periods();
        let (lo, hi) = (u.q.min() - 1.0, u.q.max() + 1.0);
        let gammas: Vec<f64> = (0..5 * t).map(|j| lo + (hi - lo) * j as f64 / (5 * t - 1) as f64).collect();
        let mut vals: Vec<f64> = rss_profile(&u, &proj, &gammas).into_iter().flatten().collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1.0));
        prop_assert!(vals.len() <= t + 1);
    }

    #[test]
    fn confidence_sets_nest(cfg in small_dgp(), a1 in 0.01f64..0.5, d in 0.0f64..0.4) {
        let (panel, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let grid = build_unit_grid(&panel, 0, 0.1).unwrap();
        let s = fit_unit_threshold(&panel.unit(0), &proj, &grid, VcovKind::Hc).unwrap();
        let wide = unit_lr_profile(&s, a1, 1.0, panel.direction()).unwrap();
        let narrow = unit_lr_profile(&s, a1 + d, 1.0, panel.direction()).unwrap();
        prop_assert!(wide.covers(s.fit.gamma));
        prop_assert_eq!(wide.lr_at(s.fit.gamma), Some(0.0));
        for g in &grid.values {
            prop_assert!(!narrow.covers(*g) || wide.covers(*g));
        }
        prop_assert!(wide.lr_values.iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn search_equals_exhaustive_oracle(cfg in small_dgp()) {
        let (panel, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let m = common::dense_annihilator(&cross_sectional_average(&panel, false));
        let leq = panel.direction() == Direction::LowRegimeLeq;
        for i in 0..panel.n_units() {
            let u = panel.unit(i);
            let grid = build_unit_grid(&panel, i, 0.1).unwrap();
            let got = fit_unit_threshold(&u, &proj, &grid, VcovKind::Hc).unwrap();
            let (g, r) = common::exhaustive_search(u.x, &u.y, &u.q, &m, u.selection, leq, 0.1, 4).unwrap();
            prop_assert_eq!(got.fit.gamma, g);
            prop_assert!((got.fit.rss - r).abs() <= 1e-9);
        }
    }

    #[test]
    fn fits_are_internally_consistent(cfg in small_dgp()) {
        let (panel, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let grid = build_pooled_grid(&panel, 0.1).unwrap();
        let pooled = fit_pooled_threshold(&panel, &proj, &grid, VcovKind::Hc).unwrap();
        let n = panel.n_units() as f64;
        let mean = pooled.unit_fits.iter().fold(DVector::zeros(3), |a, f| a + &f.theta) / n;
        prop_assert!((&mean - &pooled.theta_mg).amax() <= 1e-12);
        let eig = pooled.sigma_mg.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.min() >= -1e-12 * eig.eigenvalues.amax().max(1e-300));
        for f in &pooled.unit_fits {
            prop_assert!((f.residuals.norm_squared() - f.rss).abs() <= 1e-8 * f.rss.max(1e-300));
            prop_assert!((&f.vcov - f.vcov.transpose()).amax() <= 1e-10 * f.vcov.amax());
        }
    }

    #[test]
    fn simulation_is_seeded(cfg in small_dgp()) {
        let (a, ta) = simulate(&cfg).unwrap();
        let (b, tb) = simulate(&cfg).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ta, tb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn bootstrap_is_seeded(cfg in small_dgp(), seed in any::<u64>()) {
        let (panel, _) = simulate(&cfg).unwrap();
        let proj = cce_projector(&panel, false).unwrap();
        let null = NullFit::new(&panel, &proj);
        let grid = build_pooled_grid(&panel, 0.15).unwrap().thin(8);
        let opts = TestOptions { n_boot: 99, seed, lag: None };
        let a = test_pooled_linearity(&panel, &proj, &null, &grid, &opts);
        let b = test_pooled_linearity(&panel, &proj, &null, &grid, &opts);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a.boot_stats, &b.boot_stats);
                let p = a.p_value.unwrap();
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert_eq!(a.statistic, a.per_gamma_wald.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            _ => prop_assert!(false, "nondeterministic outcome"),
        }
    }
}
