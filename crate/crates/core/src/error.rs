use thiserror::Error;

/// Errors raised while building or loading datasets and design matrices.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("duplicate column name `{0}`")]
    DuplicateName(String),
    #[error("column `{name}` has {got} values, expected {expected}")]
    LengthMismatch {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("discrete covariate `{0}` needs at least two distinct levels")]
    TooFewLevels(String),
    #[error("row {row}: level index {index} of `{name}` outside 0..{levels}")]
    LevelOutOfRange {
        name: String,
        row: usize,
        index: usize,
        levels: usize,
    },
    #[error("row {row}: unknown level `{level}` for discrete covariate `{name}`")]
    UnknownLevel {
        name: String,
        row: usize,
        level: String,
    },
    #[error("row {row}: `{name}` must be strictly positive, got {value}")]
    NonPositive { name: String, row: usize, value: f64 },
    #[error("row {row}: `{name}` must be finite, got {value}")]
    NonFinite { name: String, row: usize, value: f64 },
    #[error("row {row}: cannot parse `{value}` in column `{name}` as a number")]
    Unparseable {
        name: String,
        row: usize,
        value: String,
    },
    #[error("missing required fields in rows {rows:?}")]
    MissingFields { rows: Vec<usize> },
    #[error("column `{0}` named in the schema is absent from the header")]
    MissingColumn(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("log term `{0}` requires a strictly positive covariate")]
    LogOfNonPositive(String),
    #[error("dataset has no response column")]
    NoResponse,
    #[error("row {row}: response {value} is not a nonnegative integer count")]
    NotACount { row: usize, value: f64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("matrix is not positive definite even after ridge regularization")]
    NotPositiveDefinite,
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("log-normal argument must be strictly positive, got {0}")]
    NonPositive(f64),
    #[error("level index {index} outside 0..{levels} for discrete covariate {covariate}")]
    LevelOutOfRange {
        covariate: usize,
        index: usize,
        levels: usize,
    },
    #[error("probability vector {0} is invalid")]
    InvalidProbabilities(usize),
    #[error("count must be a nonnegative integer, got {0}")]
    InvalidCount(f64),
    #[error("exposure must be strictly positive, got {0}")]
    InvalidExposure(f64),
}

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("sum of weights must be positive")]
    ZeroWeight,
    #[error("input lengths disagree: design has {rows} rows, {what} has {got}")]
    Length {
        what: &'static str,
        rows: usize,
        got: usize,
    },
    #[error("all design columns are collinear or unsupported by positive weights")]
    RankDeficient,
    #[error("invalid response value {value} at row {row}: {reason}")]
    InvalidResponse {
        row: usize,
        value: f64,
        reason: &'static str,
    },
}

/// Failures of the EM fitting routines.
#[derive(Debug, Error)]
pub enum EmError {
    #[error("component count must be at least 1")]
    ZeroComponents,
    #[error(
        "sample too small: n = {n} but K = {k} components with design width {width} need at least {needed}"
    )]
    Sizing {
        n: usize,
        k: usize,
        width: usize,
        needed: usize,
    },
    #[error("component {component} collapsed (posterior mass {mass:.3} < {threshold:.3})")]
    Collapse {
        component: usize,
        mass: f64,
        threshold: f64,
    },
    #[error("row {0}: every component assigns zero density")]
    ZeroDensity(usize),
    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: String },
    #[error("posterior matrix is {rows}x{cols}, expected {n}x{k}")]
    PosteriorShape {
        rows: usize,
        cols: usize,
        n: usize,
        k: usize,
    },
    #[error("initial labels: {0}")]
    BadLabels(String),
    #[error("models cannot be compared: {0}")]
    Incompatible(String),
    #[error("response must be nonnegative integer counts for this model (row {row}: {value})")]
    NotCounts { row: usize, value: f64 },
    #[error("severity fitting needs positive claim weights (row {0})")]
    NonPositiveClaimWeight(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("test statistic {0} is negative: the alternative fit is worse than the nested null")]
    BrokenNesting(f64),
    #[error("degrees of freedom must be at least 1")]
    ZeroDegrees,
    #[error("label vectors differ in length ({0} vs {1})")]
    LabelLength(usize, usize),
    #[error("empty candidate range")]
    EmptyRange,
    /// Carries the annotated table so callers can report each failure.
    #[error("no candidate K produced a fit")]
    NoSuccessfulFit(Vec<crate::selection::SelectionRow>),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("unknown condition `{0}` (expected `normal` or `close`)")]
    UnknownCondition(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Umbrella error for callers that drive several modules at once.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Em(#[from] EmError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
