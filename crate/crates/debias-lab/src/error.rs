use std::path::PathBuf;

/// Errors raised by the library.
///
/// Variants fall into two families that the command-line front end maps to
/// distinct exit codes: precondition failures (bad inputs, infeasible
/// perturbations, size limits) and convergence failures (numerical searches
/// that ran out of budget).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid grid space: {0}")]
    InvalidSpace(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("perturbation infeasible at t = {t}; largest feasible |t| is {radius}")]
    InfeasibleRadius { t: f64, radius: f64 },

    #[error("conditioning slice {slice} has zero mass")]
    DegenerateSlice { slice: usize },

    #[error("degenerate nuisance at atom {atom}: {reason}")]
    DegenerateNuisance { atom: usize, reason: String },

    #[error("invalid estimand parameters: {0}")]
    InvalidSpec(String),

    #[error("invalid direction: coefficient vector is zero")]
    InvalidDirection,

    #[error("no convergence after {evaluations} evaluations; best residual {residual:e}")]
    NoConvergence { evaluations: usize, residual: f64 },

    #[error("outside the uncertainty set: {0}")]
    UncertaintyViolation(String),

    #[error("corruption leaves the admissible range; largest achievable eps is {achievable}")]
    ClippedCorruption { achievable: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    #[error("bumped direction is not balanced: residual mass {mass:e}")]
    Pairing { mass: f64 },

    #[error("construction precondition failed: {0}")]
    Precondition(String),

    #[error("space is not 3-nondegenerate: {0}")]
    Nondegenerate(String),

    #[error("{name} = {value} is outside {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of an iterative search rather than of its inputs.
    pub fn is_convergence(&self) -> bool {
        matches!(self, Error::NoConvergence { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
