//! Resolution of run settings from defaults, key=value files and flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cce_threshold::{DgpConfig, Direction, EstimationOptions, QTransform, VcovKind};
use clap::{Args, Subcommand};
use serde::Serialize;

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Unit-specific thresholds and slopes.
    EstimateHet,
    /// Common threshold with mean-group slopes.
    EstimateSemi,
    /// Sup-Wald linearity tests with wild-bootstrap p-values.
    TestLinearity,
    /// LR profiles and threshold confidence sets.
    Ci,
    /// MBIC choice between the heterogeneous and semi-homogeneous models.
    Select,
    /// Write a simulated panel as CSV.
    Simulate,
    /// Monte Carlo replications of the estimators and tests.
    Mc,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::EstimateHet => "estimate-het",
            Command::EstimateSemi => "estimate-semi",
            Command::TestLinearity => "test-linearity",
            Command::Ci => "ci",
            Command::Select => "select",
            Command::Simulate => "simulate",
            Command::Mc => "mc",
        }
    }

    fn stochastic(self) -> bool {
        matches!(self, Command::TestLinearity | Command::Simulate | Command::Mc)
    }

    fn needs_data(self) -> bool {
        !matches!(self, Command::Simulate | Command::Mc)
    }
}

/// Every flag also exists as a key in `--config` and `--schema` files
/// (dashes become underscores). Command-line values always win.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Key=value settings file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<String>,
    /// Key=value column mapping file (unit_col, time_col, y_col, x_cols, q_col, threshold_cols).
    #[arg(long, global = true, value_name = "FILE")]
    pub schema: Option<String>,
    /// Long-format panel CSV.
    #[arg(long, global = true, value_name = "FILE")]
    pub data: Option<String>,
    #[arg(long, global = true, value_name = "COL")]
    pub unit_col: Option<String>,
    #[arg(long, global = true, value_name = "COL")]
    pub time_col: Option<String>,
    #[arg(long, global = true, value_name = "COL")]
    pub y_col: Option<String>,
    /// Comma-separated regressor columns.
    #[arg(long, global = true, value_name = "COLS")]
    pub x_cols: Option<String>,
    /// Threshold variable column.
    #[arg(long, global = true, value_name = "COL")]
    pub q_col: Option<String>,
    /// Threshold variable for the semi-homogeneous model in `select`.
    #[arg(long, global = true, value_name = "COL")]
    pub q_col_semi: Option<String>,
    /// Comma-separated regressors whose slopes change at the threshold (default: all).
    #[arg(long, global = true, value_name = "COLS")]
    pub threshold_cols: Option<String>,
    /// Fraction of distinct threshold values trimmed from each end.
    #[arg(long, global = true)]
    pub trim: Option<String>,
    /// hc or hac.
    #[arg(long, global = true)]
    pub vcov: Option<String>,
    /// HAC bandwidth (Bartlett lags).
    #[arg(long, global = true)]
    pub bandwidth: Option<String>,
    /// Significance level.
    #[arg(long, global = true)]
    pub level: Option<String>,
    /// Bootstrap replicates.
    #[arg(long, global = true)]
    pub boot: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// leq or geq.
    #[arg(long, global = true)]
    pub direction: Option<String>,
    /// Treat the intercept as a known common factor.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub intercept_factor: Option<String>,
    /// Output file (default: standard output).
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<String>,
    /// json or csv.
    #[arg(long, global = true)]
    pub format: Option<String>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<String>,
    /// Single-byte CSV delimiter.
    #[arg(long, global = true)]
    pub delimiter: Option<String>,
    /// none or percentile.
    #[arg(long, global = true)]
    pub q_transform: Option<String>,
    /// Thin threshold grids to at most this many points.
    #[arg(long, global = true)]
    pub grid_points: Option<String>,
    /// LR scale: a positive number or `plugin`.
    #[arg(long, global = true)]
    pub eta2: Option<String>,
    /// unit, pooled or both.
    #[arg(long, global = true)]
    pub scope: Option<String>,
    /// Monte Carlo replications.
    #[arg(long, global = true)]
    pub replications: Option<String>,
    /// JSON simulation design.
    #[arg(long, global = true, value_name = "FILE")]
    pub dgp: Option<String>,
    #[arg(long, global = true)]
    pub n_units: Option<String>,
    #[arg(long, global = true)]
    pub n_periods: Option<String>,
    /// Where `simulate` writes the true parameters as JSON.
    #[arg(long, global = true, value_name = "FILE")]
    pub truth: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("data", &self.data),
            ("unit_col", &self.unit_col),
            ("time_col", &self.time_col),
            ("y_col", &self.y_col),
            ("x_cols", &self.x_cols),
            ("q_col", &self.q_col),
            ("q_col_semi", &self.q_col_semi),
            ("threshold_cols", &self.threshold_cols),
            ("trim", &self.trim),
            ("vcov", &self.vcov),
            ("bandwidth", &self.bandwidth),
            ("level", &self.level),
            ("boot", &self.boot),
            ("seed", &self.seed),
            ("direction", &self.direction),
            ("intercept_factor", &self.intercept_factor),
            ("out", &self.out),
            ("format", &self.format),
            ("jobs", &self.jobs),
            ("delimiter", &self.delimiter),
            ("q_transform", &self.q_transform),
            ("grid_points", &self.grid_points),
            ("eta2", &self.eta2),
            ("scope", &self.scope),
            ("replications", &self.replications),
            ("dgp", &self.dgp),
            ("n_units", &self.n_units),
            ("n_periods", &self.n_periods),
            ("truth", &self.truth),
        ]
    }
}

const SCHEMA_KEYS: [&str; 6] = ["unit_col", "time_col", "y_col", "x_cols", "q_col", "threshold_cols"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Unit,
    Pooled,
    Both,
}

impl Scope {
    pub fn units(self) -> bool {
        self != Scope::Pooled
    }
    pub fn pooled(self) -> bool {
        self != Scope::Unit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Eta2Choice {
    Value(f64),
    Plugin,
}

/// Fully resolved settings; embedded verbatim in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub data: Option<String>,
    pub unit_col: String,
    pub time_col: String,
    pub y_col: String,
    pub x_cols: Vec<String>,
    pub q_col: String,
    pub q_col_semi: Option<String>,
    pub threshold_cols: Vec<String>,
    pub trim: f64,
    pub vcov: VcovKind,
    pub level: f64,
    pub boot: usize,
    pub seed: Option<u64>,
    pub direction: Direction,
    pub intercept_factor: bool,
    pub out: Option<String>,
    pub format: Format,
    pub jobs: Option<usize>,
    pub delimiter: char,
    pub q_transform: QTransform,
    pub grid_points: Option<usize>,
    pub eta2: Eta2Choice,
    pub scope: Scope,
    pub replications: usize,
    pub dgp: Option<DgpConfig>,
    pub truth: Option<String>,
}

fn read_pairs(path: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read '{path}': {e}")))?;
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("{path}:{}: expected key=value", n + 1)))?;
        let key = k.trim().replace('-', "_");
        if !allowed.contains(&key.as_str()) {
            return Err(Failure::usage(format!("{path}:{}: unknown key '{}'", n + 1, k.trim())));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

struct Layers(BTreeMap<String, String>);

impl Layers {
    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| Failure::usage(format!("invalid {key} '{v}': {e}"))))
            .transpose()
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default()
    }
}

impl RunConfig {
    pub fn resolve(command: Command, flags: &Flags) -> Result<Self, Failure> {
        let all: Vec<&str> = flags.pairs().iter().map(|(k, _)| *k).collect();
        let mut map = BTreeMap::new();
        if let Some(p) = &flags.config {
            map.extend(read_pairs(p, &all)?);
        }
        if let Some(p) = &flags.schema {
            map.extend(read_pairs(p, &SCHEMA_KEYS)?);
        }
        for (k, v) in flags.pairs() {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        let l = Layers(map);

        let vcov = match l.get("vcov").unwrap_or("hc") {
            "hc" => VcovKind::Hc,
            "hac" => VcovKind::Hac { bandwidth: l.parse("bandwidth")? },
            other => return Err(Failure::usage(format!("vcov must be hc or hac, got '{other}'"))),
        };
        if vcov == VcovKind::Hc && l.get("bandwidth").is_some() {
            return Err(Failure::usage("bandwidth applies only with vcov=hac".into()));
        }
        let direction = match l.get("direction").unwrap_or("leq") {
            "leq" => Direction::LowRegimeLeq,
            "geq" => Direction::HighRegimeGeq,
            other => return Err(Failure::usage(format!("direction must be leq or geq, got '{other}'"))),
        };
        let format = match l.get("format").unwrap_or("json") {
            "json" => Format::Json,
            "csv" => Format::Csv,
            other => return Err(Failure::usage(format!("format must be json or csv, got '{other}'"))),
        };
        let q_transform = match l.get("q_transform").unwrap_or("none") {
            "none" => QTransform::None,
            "percentile" => QTransform::Percentile,
            other => return Err(Failure::usage(format!("q_transform must be none or percentile, got '{other}'"))),
        };
        let scope = match l.get("scope").unwrap_or("both") {
            "unit" => Scope::Unit,
            "pooled" => Scope::Pooled,
            "both" => Scope::Both,
            other => return Err(Failure::usage(format!("scope must be unit, pooled or both, got '{other}'"))),
        };
        let eta2 = match l.get("eta2") {
            None => Eta2Choice::Value(1.0),
            Some("plugin") => Eta2Choice::Plugin,
            Some(v) => match v.parse::<f64>() {
                Ok(x) if x > 0.0 && x.is_finite() => Eta2Choice::Value(x),
                _ => return Err(Failure::usage(format!("eta2 must be a positive number or 'plugin', got '{v}'"))),
            },
        };
        let delimiter = match l.get("delimiter") {
            None => ',',
            Some("tab") | Some("\\t") => '\t',
            Some(d) if d.len() == 1 => d.chars().next().unwrap(),
            Some(d) => return Err(Failure::usage(format!("delimiter must be a single byte, got '{d}'"))),
        };

        let trim: f64 = l.parse("trim")?.unwrap_or(cce_threshold::threshold::DEFAULT_TRIM);
        if !(0.0..0.5).contains(&trim) {
            return Err(Failure::usage(format!("trim must lie in [0, 0.5), got {trim}")));
        }
        let level: f64 = l.parse("level")?.unwrap_or(0.05);
        if !(level > 0.0 && level < 1.0) {
            return Err(Failure::usage(format!("level must lie in (0, 1), got {level}")));
        }
        let seed: Option<u64> = l.parse("seed")?;
        if command.stochastic() && seed.is_none() {
            return Err(Failure::usage(format!("{} needs an explicit --seed", command.name())));
        }
        let data = l.get("data").map(str::to_string);
        if command.needs_data() && data.is_none() {
            return Err(Failure::usage(format!("{} needs --data", command.name())));
        }
        let x_cols = l.list("x_cols");
        if command.needs_data() && x_cols.is_empty() {
            return Err(Failure::usage("x_cols must name at least one regressor".into()));
        }
        let mut threshold_cols = l.list("threshold_cols");
        if threshold_cols.is_empty() {
            threshold_cols = x_cols.clone();
        }

        let dgp = if matches!(command, Command::Simulate | Command::Mc) {
            let mut d = match l.get("dgp") {
                Some(p) => {
                    let text = fs::read_to_string(Path::new(p)).map_err(|e| Failure::usage(format!("cannot read '{p}': {e}")))?;
                    serde_json::from_str::<DgpConfig>(&text).map_err(|e| Failure::usage(format!("invalid dgp file '{p}': {e}")))?
                }
                None => DgpConfig::default(),
            };
            if let Some(n) = l.parse("n_units")? {
                d.n_units = n;
            }
            if let Some(t) = l.parse("n_periods")? {
                d.n_periods = t;
            }
            if l.get("direction").is_some() {
                d.direction = direction;
            }
            d.seed = seed.expect("checked above");
            d.validate()?;
            Some(d)
        } else {
            None
        };

        Ok(Self {
            command,
            data,
            unit_col: l.get("unit_col").unwrap_or("unit").into(),
            time_col: l.get("time_col").unwrap_or("time").into(),
            y_col: l.get("y_col").unwrap_or("y").into(),
            x_cols,
            q_col: l.get("q_col").unwrap_or("q").into(),
            q_col_semi: l.get("q_col_semi").map(str::to_string),
            threshold_cols,
            trim,
            vcov,
            level,
            boot: l.parse("boot")?.unwrap_or(cce_threshold::linearity::DEFAULT_BOOT),
            seed,
            direction,
            intercept_factor: l.parse("intercept_factor")?.unwrap_or(false),
            out: l.get("out").map(str::to_string),
            format,
            jobs: l.parse("jobs")?,
            delimiter,
            q_transform,
            grid_points: l.parse("grid_points")?,
            eta2,
            scope,
            replications: l.parse("replications")?.unwrap_or(100),
            dgp,
            truth: l.get("truth").map(str::to_string),
        })
    }

    pub fn estimation(&self) -> EstimationOptions {
        EstimationOptions {
            trim: self.trim,
            vcov: self.vcov,
            intercept_factor: self.intercept_factor,
            max_grid_points: self.grid_points,
        }
    }

    pub fn schema(&self, q_col: &str) -> cce_threshold::Schema {
        let x: Vec<&str> = self.x_cols.iter().map(String::as_str).collect();
        let th: Vec<&str> = self.threshold_cols.iter().map(String::as_str).collect();
        let mut s = cce_threshold::Schema::new(&self.unit_col, &self.time_col, &self.y_col, &x, q_col, &th);
        s.direction = self.direction;
        s.q_transform = self.q_transform;
        s.delimiter = self.delimiter as u8;
        s
    }
}
