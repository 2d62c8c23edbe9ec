use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // grid
    #[error("flow direction cycle through cell ({row}, {col})")]
    CycleDetected { row: usize, col: usize },
    #[error("cell ({row}, {col}) drains off-grid or into an inactive cell")]
    DanglingFlowDirection { row: usize, col: usize },
    #[error("invalid D8 code {code} at cell ({row}, {col})")]
    InvalidFlowCode { row: usize, col: usize, code: i64 },
    #[error("cell ({row}, {col}) is not an active cell")]
    InactiveCell { row: usize, col: usize },
    #[error("descriptor '{name}' is constant over the active domain")]
    ConstantDescriptor { name: String },
    #[error("descriptor '{name}' has a non-finite value at an active cell")]
    NonFiniteDescriptor { name: String },
    #[error("gauge weights sum to {sum}, expected 1")]
    WeightSum { sum: f64 },
    #[error("unknown gauge '{0}'")]
    UnknownGauge(String),

    // model
    #[error("invalid forcing: {0}")]
    InvalidForcing(String),
    #[error("parameter {param} = {value} outside [{lower}, {upper}] at cell {cell}")]
    ParameterOutOfBounds {
        param: &'static str,
        value: f64,
        lower: f64,
        upper: f64,
        cell: usize,
    },

    // objective
    #[error("observed series has zero variance")]
    ZeroVarianceObs,
    #[error("series length mismatch: {sim} simulated vs {obs} observed")]
    LengthMismatch { sim: usize, obs: usize },
    #[error("gauge '{gauge}': {source}")]
    Gauge {
        gauge: String,
        #[source]
        source: Box<Error>,
    },
    #[error("Tikhonov regularization requested without a background control")]
    MissingBackground,

    // mapping
    #[error("value {value} outside the open interval ({lower}, {upper})")]
    OutOfOpenInterval { value: f64, lower: f64, upper: f64 },
    #[error("prior for parameter {param} lies on a bound ({value})")]
    PriorOnBound { param: &'static str, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    // optimizers
    #[error("line search failed to satisfy the Wolfe conditions")]
    LineSearchFailure,
    #[error("cost evaluated to a non-finite value")]
    NonFiniteCost,

    // bayes
    #[error("minimum ensemble cost must be positive, got {0}")]
    NonPositiveJmin(f64),
    #[error("posterior normalizer underflowed")]
    DegenerateWeights,
    #[error("posterior variance of component {component} is zero")]
    ZeroVarianceComponent { component: usize },

    // io / config
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid synthetic domain: {0}")]
    SpecInvalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than a defect.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::LineSearchFailure | Error::DegenerateWeights)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
