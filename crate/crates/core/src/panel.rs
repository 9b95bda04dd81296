//! Balanced panels, CSV ingestion, regime splitting and the CCE projector.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Which side of the threshold carries the extra coefficient `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Indicator `q <= gamma`.
    #[default]
    LowRegimeLeq,
    /// Indicator `q >= gamma`.
    HighRegimeGeq,
}

impl Direction {
    #[inline]
    pub fn fires(self, q: f64, gamma: f64) -> bool {
        match self {
            Direction::LowRegimeLeq => q <= gamma,
            Direction::HighRegimeGeq => q >= gamma,
        }
    }
}

/// Optional transformation of the threshold variable at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QTransform {
    #[default]
    None,
    /// Per-unit empirical percentile, `100 * #{s : q_s <= q_t} / T`, in (0, 100].
    Percentile,
}

/// Column mapping for [`load_panel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub unit: String,
    pub time: String,
    pub y: String,
    pub x: Vec<String>,
    /// Threshold variable column; may coincide with one of `x`.
    pub q: String,
    /// Regressors carrying the threshold effect (subset of `x`).
    pub threshold: Vec<String>,
    pub direction: Direction,
    pub q_transform: QTransform,
    pub delimiter: u8,
}

impl Schema {
    pub fn new(unit: &str, time: &str, y: &str, x: &[&str], q: &str, threshold: &[&str]) -> Self {
        Self {
            unit: unit.into(),
            time: time.into(),
            y: y.into(),
            x: x.iter().map(|s| s.to_string()).collect(),
            q: q.into(),
            threshold: threshold.iter().map(|s| s.to_string()).collect(),
            direction: Direction::LowRegimeLeq,
            q_transform: QTransform::None,
            delimiter: b',',
        }
    }

    pub fn selection_mask(&self) -> Result<Vec<bool>> {
        for t in &self.threshold {
            if !self.x.contains(t) {
                return Err(Error::Schema(format!(
                    "threshold column '{t}' is not among the regressors"
                )));
            }
        }
        Ok(self.x.iter().map(|c| self.threshold.contains(c)).collect())
    }
}

/// Summary of what was ingested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestionReport {
    pub n_units: usize,
    pub n_periods: usize,
    pub k_regressors: usize,
    pub r_threshold: usize,
    /// Regressors constant over all units and periods; these act as known factors
    /// and do not count toward the rank condition.
    pub constant_regressors: Vec<String>,
}

/// A balanced N x T panel with K regressors and a scalar threshold variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    y: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    q: DMatrix<f64>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
    regressor_names: Vec<String>,
    selection: Vec<bool>,
    direction: Direction,
}

impl PanelDataset {
    /// Builds a panel from in-memory arrays.
    ///
    /// `y` and `q` are T x N (one column per unit); `x` holds one T x K matrix per unit.
    pub fn new(
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        q: DMatrix<f64>,
        selection: Vec<bool>,
        direction: Direction,
    ) -> Result<Self> {
        let (t, n) = y.shape();
        if n == 0 || t == 0 {
            return Err(Error::InvalidConfig("panel must have at least one unit and one period".into()));
        }
        if x.len() != n {
            return Err(Error::InvalidConfig(format!("{} regressor blocks for {n} units", x.len())));
        }
        if q.shape() != (t, n) {
            return Err(Error::InvalidConfig("threshold variable shape differs from outcome".into()));
        }
        let k = x[0].ncols();
        if x.iter().any(|xi| xi.shape() != (t, k)) {
            return Err(Error::InvalidConfig("every unit needs a T x K regressor block".into()));
        }
        if selection.len() != k {
            return Err(Error::InvalidConfig(format!(
                "selection mask has {} entries for {k} regressors",
                selection.len()
            )));
        }
        if !selection.iter().any(|s| *s) {
            return Err(Error::InvalidConfig("at least one regressor must carry the threshold effect".into()));
        }
        let finite = y.iter().chain(q.iter()).chain(x.iter().flat_map(|m| m.iter())).all(|v| v.is_finite());
        if !finite {
            return Err(Error::MissingValues { locations: vec!["non-finite value in arrays".into()] });
        }
        Ok(Self {
            unit_labels: (1..=n).map(|i| format!("unit{i}")).collect(),
            time_labels: (1..=t).map(|s| s.to_string()).collect(),
            regressor_names: (1..=k).map(|j| format!("x{j}")).collect(),
            y,
            x,
            q,
            selection,
            direction,
        })
    }

    pub fn with_labels(mut self, units: Vec<String>, times: Vec<String>, regressors: Vec<String>) -> Result<Self> {
        if units.len() != self.n_units() || times.len() != self.n_periods() || regressors.len() != self.k() {
            return Err(Error::InvalidConfig("label vector lengths do not match panel".into()));
        }
        self.unit_labels = units;
        self.time_labels = times;
        self.regressor_names = regressors;
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.y.ncols()
    }
    pub fn n_periods(&self) -> usize {
        self.y.nrows()
    }
    pub fn k(&self) -> usize {
        self.x[0].ncols()
    }
    /// Number of regressors carrying the threshold effect.
    pub fn r(&self) -> usize {
        self.selection.iter().filter(|s| **s).count()
    }
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn x(&self, unit: usize) -> &DMatrix<f64> {
        &self.x[unit]
    }
    pub fn y_unit(&self, unit: usize) -> DVector<f64> {
        self.y.column(unit).into_owned()
    }
    pub fn q_unit(&self, unit: usize) -> DVector<f64> {
        self.q.column(unit).into_owned()
    }
    pub fn selection(&self) -> &[bool] {
        &self.selection
    }
    pub fn direction(&self) -> Direction {
        self.direction
    }
    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }
    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }
    pub fn regressor_names(&self) -> &[String] {
        &self.regressor_names
    }

    /// Borrowed view of one unit's data.
    pub fn unit(&self, i: usize) -> UnitData<'_> {
        UnitData {
            x: &self.x[i],
            y: self.y_unit(i),
            q: self.q_unit(i),
            selection: &self.selection,
            direction: self.direction,
        }
    }

    /// Same regressors and threshold variable with a different outcome matrix.
    pub fn with_outcome(&self, y: DMatrix<f64>) -> Result<Self> {
        if y.shape() != self.y.shape() {
            return Err(Error::InvalidConfig("replacement outcome has the wrong shape".into()));
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }

    /// Same panel with a different threshold variable (e.g. another column or a transform).
    pub fn with_threshold_variable(&self, q: DMatrix<f64>) -> Result<Self> {
        if q.shape() != self.q.shape() || q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("replacement threshold variable has the wrong shape".into()));
        }
        let mut out = self.clone();
        out.q = q;
        Ok(out)
    }

    /// Regressors that are constant across every unit and period.
    pub fn constant_regressors(&self) -> Vec<bool> {
        (0..self.k())
            .map(|j| {
                let v0 = self.x[0][(0, j)];
                self.x.iter().all(|xi| xi.column(j).iter().all(|v| *v == v0))
            })
            .collect()
    }

    pub fn report(&self) -> IngestionReport {
        let constant = self.constant_regressors();
        IngestionReport {
            n_units: self.n_units(),
            n_periods: self.n_periods(),
            k_regressors: self.k(),
            r_threshold: self.r(),
            constant_regressors: self
                .regressor_names
                .iter()
                .zip(constant)
                .filter(|(_, c)| *c)
                .map(|(n, _)| n.clone())
                .collect(),
        }
    }

    /// Per-unit percentile transform of the threshold variable.
    pub fn percentile_q(&self) -> DMatrix<f64> {
        let mut out = self.q.clone();
        for i in 0..self.n_units() {
            let col = self.q.column(i);
            let mut sorted: Vec<f64> = col.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let t = sorted.len() as f64;
            for (s, v) in col.iter().enumerate() {
                let rank = sorted.partition_point(|w| *w <= *v);
                out[(s, i)] = 100.0 * rank as f64 / t;
            }
        }
        out
    }
}

/// One unit's design: T x K regressors, outcome and threshold variable.
#[derive(Debug, Clone)]
pub struct UnitData<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: DVector<f64>,
    pub q: DVector<f64>,
    pub selection: &'a [bool],
    pub direction: Direction,
}

impl UnitData<'_> {
    pub fn n_periods(&self) -> usize {
        self.x.nrows()
    }
    pub fn k(&self) -> usize {
        self.x.ncols()
    }
    pub fn r(&self) -> usize {
        self.selection.iter().filter(|s| **s).count()
    }
}

/// Orders labels numerically when every label parses as a number, lexicographically otherwise.
fn sort_labels(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    match numeric {
        Some(_) => labels.sort_by(|a, b| {
            let fa: f64 = a.trim().parse().unwrap();
            let fb: f64 = b.trim().parse().unwrap();
            fa.total_cmp(&fb).then_with(|| a.cmp(b))
        }),
        None => labels.sort(),
    }
}

fn parse_value(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if s.is_empty() {
        return None;
    }
    let v: f64 = s.parse().ok()?;
    v.is_finite().then_some(v)
}

/// Reads a long-format CSV (one row per unit-period) into a balanced panel.
///
/// Returns the panel sorted by (unit, time) together with an ingestion report.
pub fn load_panel<R: Read>(source: R, schema: &Schema) -> Result<(PanelDataset, IngestionReport)> {
    let selection = schema.selection_mask()?;
    if schema.x.is_empty() {
        return Err(Error::Schema("at least one regressor column is required".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let unit_c = col(&schema.unit)?;
    let time_c = col(&schema.time)?;
    let y_c = col(&schema.y)?;
    let x_c: Vec<usize> = schema.x.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let q_c = col(&schema.q)?;
    let k = x_c.len();

    // (unit, time) -> (y, x, q)
    let mut cells: HashMap<(String, String), (f64, Vec<f64>, f64)> = HashMap::new();
    let mut missing = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = row_idx + 2; // 1-based, after the header
        let get = |c: usize| record.get(c).unwrap_or("");
        let unit = get(unit_c).to_string();
        let time = get(time_c).to_string();
        let mut value = |c: usize, name: &str| -> f64 {
            match parse_value(get(c)) {
                Some(v) => v,
                None => {
                    missing.push(format!("line {line}, column '{name}'"));
                    f64::NAN
                }
            }
        };
        let yv = value(y_c, &schema.y);
        let xv: Vec<f64> = x_c.iter().zip(&schema.x).map(|(c, n)| value(*c, n)).collect();
        let qv = value(q_c, &schema.q);
        if cells.insert((unit.clone(), time.clone()), (yv, xv, qv)).is_some() {
            return Err(Error::Duplicate { unit, time });
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingValues { locations: missing });
    }
    if cells.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }

    let mut per_unit: BTreeMap<String, HashSet<String>> = BTreeMap::new();
    for (u, t) in cells.keys() {
        per_unit.entry(u.clone()).or_default().insert(t.clone());
    }
    let mut all_times: Vec<String> = per_unit
        .values()
        .flat_map(|s| s.iter().cloned())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    sort_labels(&mut all_times);
    let t = all_times.len();
    let mut offending: Vec<String> = per_unit
        .iter()
        .filter(|(_, times)| times.len() != t)
        .map(|(u, _)| u.clone())
        .collect();
    if !offending.is_empty() {
        sort_labels(&mut offending);
        return Err(Error::Unbalanced { expected: t, units: offending });
    }
    let mut units: Vec<String> = per_unit.keys().cloned().collect();
    sort_labels(&mut units);
    let n = units.len();

    let mut y = DMatrix::zeros(t, n);
    let mut q = DMatrix::zeros(t, n);
    let mut x = vec![DMatrix::zeros(t, k); n];
    for (i, u) in units.iter().enumerate() {
        for (s, tl) in all_times.iter().enumerate() {
            let (yv, xv, qv) = &cells[&(u.clone(), tl.clone())];
            y[(s, i)] = *yv;
            q[(s, i)] = *qv;
            for j in 0..k {
                x[i][(s, j)] = xv[j];
            }
        }
    }
    let mut panel = PanelDataset::new(y, x, q, selection, schema.direction)?
        .with_labels(units, all_times, schema.x.clone())?;
    if schema.q_transform == QTransform::Percentile {
        panel.q = panel.percentile_q();
    }
    let report = panel.report();
    Ok((panel, report))
}

/// Cross-sectional average of the regressors (T x K), optionally with a leading column of ones.
pub fn cross_sectional_average(panel: &PanelDataset, include_intercept: bool) -> DMatrix<f64> {
    let t = panel.n_periods();
    let k = panel.k();
    let mut avg = DMatrix::zeros(t, k);
    for xi in &panel.x {
        avg += xi;
    }
    avg /= panel.n_units() as f64;
    if include_intercept {
        avg.insert_column(0, 1.0)
    } else {
        avg
    }
}

/// Projector removing the cross-sectional averages of the regressors
/// (with a column of ones first when the intercept is treated as a known factor).
pub fn cce_projector(panel: &PanelDataset, intercept_factor: bool) -> Result<Projector> {
    make_projector(&cross_sectional_average(panel, intercept_factor))
}

/// The annihilator `M = I - A (A'A)^+ A'` of a T x p basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    basis: DMatrix<f64>,
    gram_pinv: DMatrix<f64>,
    /// Orthonormal basis of the column space of `basis`; `M v = v - U U' v`.
    range: DMatrix<f64>,
}

impl Projector {
    pub fn identity(t: usize) -> Self {
        Self {
            basis: DMatrix::zeros(t, 0),
            gram_pinv: DMatrix::zeros(0, 0),
            range: DMatrix::zeros(t, 0),
        }
    }
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }
    pub fn gram_pinv(&self) -> &DMatrix<f64> {
        &self.gram_pinv
    }
    pub fn range(&self) -> &DMatrix<f64> {
        &self.range
    }
    pub fn n_rows(&self) -> usize {
        self.basis.nrows()
    }
    pub fn rank(&self) -> usize {
        self.range.ncols()
    }

    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        if self.range.ncols() == 0 {
            return v.clone();
        }
        let coef = self.range.transpose() * v;
        v - &self.range * coef
    }

    pub fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.range.ncols() == 0 {
            return v.clone();
        }
        let coef = self.range.transpose() * v;
        v - &self.range * coef
    }

    /// Dense T x T matrix, for diagnostics and tests.
    pub fn matrix(&self) -> DMatrix<f64> {
        let t = self.n_rows();
        DMatrix::identity(t, t) - &self.range * self.range.transpose()
    }
}

/// Builds the projector annihilating the columns of `basis`.
pub fn make_projector(basis: &DMatrix<f64>) -> Result<Projector> {
    let (t, p) = basis.shape();
    if p >= t {
        return Err(Error::ProjectionTooWide { rows: t, cols: p });
    }
    if basis.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("projection basis has non-finite entries".into()));
    }
    Ok(Projector {
        gram_pinv: linalg::gram_pinv(basis),
        range: linalg::orthonormal_basis(basis),
        basis: basis.clone(),
    })
}

/// Regime design for one unit at one threshold value.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeMatrices {
    /// T x r: selected regressors where the indicator fires, zero elsewhere.
    pub w_low: DMatrix<f64>,
    /// T x (K + r): `[X | w_low]`.
    pub z: DMatrix<f64>,
    pub indicator: Vec<bool>,
}

impl RegimeMatrices {
    pub fn count_firing(&self) -> usize {
        self.indicator.iter().filter(|b| **b).count()
    }
}

/// Selected columns of `x` (the `X R` product).
pub fn selected_columns(x: &DMatrix<f64>, selection: &[bool]) -> DMatrix<f64> {
    let idx: Vec<usize> = selection.iter().enumerate().filter(|(_, s)| **s).map(|(j, _)| j).collect();
    x.select_columns(idx.iter())
}

pub fn regime_split(
    x_i: &DMatrix<f64>,
    q_i: &DVector<f64>,
    gamma: f64,
    selection: &[bool],
    direction: Direction,
) -> RegimeMatrices {
    let mut w_low = selected_columns(x_i, selection);
    let indicator: Vec<bool> = q_i.iter().map(|q| direction.fires(*q, gamma)).collect();
    for (t, on) in indicator.iter().enumerate() {
        if !on {
            w_low.row_mut(t).fill(0.0);
        }
    }
    let k = x_i.ncols();
    let r = w_low.ncols();
    let mut z = DMatrix::zeros(x_i.nrows(), k + r);
    z.columns_mut(0, k).copy_from(x_i);
    z.columns_mut(k, r).copy_from(&w_low);
    RegimeMatrices { w_low, z, indicator }
}

/// Writes the panel in long format: `unit,time,y,<regressors>,q`.
pub fn write_panel<W: std::io::Write>(panel: &PanelDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["unit".to_string(), "time".to_string(), "y".to_string()];
    header.extend(panel.regressor_names().iter().cloned());
    header.push("q".to_string());
    w.write_record(&header)?;
    for i in 0..panel.n_units() {
        let x = panel.x(i);
        for s in 0..panel.n_periods() {
            let mut rec = vec![panel.unit_labels()[i].clone(), panel.time_labels()[s].clone(), panel.y()[(s, i)].to_string()];
            rec.extend((0..panel.k()).map(|j| x[(s, j)].to_string()));
            rec.push(panel.q()[(s, i)].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
