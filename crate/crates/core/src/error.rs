use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unbalanced panel: expected {expected} periods per unit, offending units: {units:?}")]
    Unbalanced { expected: usize, units: Vec<String> },

    #[error("missing or unparsable values at {locations:?}")]
    MissingValues { locations: Vec<String> },

    #[error("duplicate observation for unit '{unit}' at time '{time}'")]
    Duplicate { unit: String, time: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("projection would annihilate everything: basis has {cols} columns but only {rows} rows")]
    ProjectionTooWide { rows: usize, cols: usize },

    #[error("parameters not identified at gamma = {gamma}: {reason}")]
    Identification { gamma: f64, reason: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("threshold grid is empty or too small: {0}")]
    EmptyGrid(String),

    #[error("threshold variable has no common support across units (max of minima {lower} > min of maxima {upper})")]
    DisjointSupport { lower: f64, upper: f64 },

    #[error("no feasible threshold value in the grid: {0}")]
    NoFeasibleGamma(String),

    #[error("rank condition violated: {factors} factors but only {regressors} regressors")]
    RankCondition { factors: usize, regressors: usize },

    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),

    #[error("bandwidth {bandwidth} invalid for {periods} periods")]
    Bandwidth { bandwidth: usize, periods: usize },

    #[error("internal consistency error: {0}")]
    Inconsistent(String),

    #[error("non-positive error variance: {0}")]
    NonPositiveVariance(String),
}
