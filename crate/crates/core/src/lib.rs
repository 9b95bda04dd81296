//! Panel threshold regression with unit-specific thresholds and slopes under
//! interactive fixed effects.
//!
//! The unobserved factor structure is removed by projecting every unit on the
//! orthogonal complement of the cross-sectional averages of the regressors
//! (Common Correlated Effects). On top of that projection the crate provides
//!
//! * per-unit threshold estimation by grid search ([`threshold`]),
//! * a common-threshold model with mean-group slopes ([`threshold::fit_pooled_threshold`]),
//! * likelihood-ratio confidence sets for thresholds ([`lr`]),
//! * sup-Wald linearity tests with wild-bootstrap p-values ([`linearity`]),
//! * an information criterion choosing between the two models ([`mbic`]),
//! * a data generator with known truth and Monte Carlo drivers ([`dgp`], [`montecarlo`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cce;
pub mod dgp;
pub mod error;
pub mod linalg;
pub mod linearity;
pub mod lr;
pub mod mbic;
pub mod montecarlo;
pub mod panel;
pub mod summary;
pub mod threshold;

pub use cce::{cce_fit_given_gamma, variance_hac, variance_hc, UnitFit, VcovKind};
pub use dgp::{derive_seed, regime_counts, simulate, DgpConfig, PerUnit, Truth};
pub use error::{Error, Result};
pub use linearity::{
    pooled_delta, sup_wald_pooled, sup_wald_unit, test_pooled_linearity, test_unit_linearity,
    wild_bootstrap_pvalue, BootstrapOutcome, NullFit, PooledDelta, TestOptions, TestReport,
    TestScope, TestStatus,
};
pub use lr::{
    lr_cdf, lr_confidence_set, lr_critical_value, lr_statistic, pooled_lr_profile, unit_lr_profile,
    Eta2Source, LrProfile,
};
pub use mbic::{mbic_heterogeneous, mbic_semi, select_model, MbicScore, ModelChoice, Selection};
pub use montecarlo::{run_monte_carlo, run_replication, McConfig, McSummary, ReplicationRecord};
pub use panel::{
    cce_projector, cross_sectional_average, load_panel, make_projector, regime_split, write_panel,
    Direction, IngestionReport, PanelDataset, Projector, QTransform, RegimeMatrices, Schema,
    UnitData,
};
pub use summary::{summarize, SummaryStats};
pub use threshold::{
    build_grid, build_pooled_grid, fit_all_units, fit_pooled_threshold, fit_unit_threshold,
    EstimationOptions, GammaGrid, GridSource, PooledFit, RssProfile, ThresholdSearch,
};
