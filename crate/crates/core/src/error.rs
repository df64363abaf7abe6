//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A quantile level outside the open interval (0, 1).
    #[error("quantile level {0} is outside (0, 1)")]
    InvalidQuantile(f64),

    /// The regression design is numerically rank deficient.
    #[error("singular design matrix: columns {columns:?} are collinear (smallest singular value {smallest_sv:.3e})")]
    SingularDesign { columns: Vec<usize>, smallest_sv: f64 },

    /// The quantile-regression solver did not reach the duality-gap target.
    #[error("quantile-regression solver failed to converge after {iterations} iterations (gap {gap:.3e})")]
    SolverFailure { iterations: usize, gap: f64 },

    /// A per-cell first-step failure, annotated with its grid position.
    #[error("first-step fit failed at group={group} time={time} u={u}: {source}")]
    CellFit {
        group: i64,
        time: i64,
        u: f64,
        #[source]
        source: Box<Error>,
    },

    /// Conformity violation between operands.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    /// The normal equations of the panel regression are singular.
    #[error("identification failure: {0}")]
    Identification(String),

    /// The loading Gram matrix is singular.
    #[error("degenerate factor loadings: S^-1 L'L is singular")]
    DegenerateLoadings,

    /// The residualized treatment indicator carries no variation.
    #[error("no identifying variation: sum of squared residualized treatment indicators is zero")]
    NoIdentifyingVariation,

    /// A policy functional was requested for a pre-policy period.
    #[error("time index {t} precedes the policy start {t0}")]
    PrePeriod { t: usize, t0: usize },

    /// A quantile level that was never fitted.
    #[error("quantile {0} is not among the fitted levels")]
    MissingQuantile(f64),

    /// Within-inequality queries require ordered quantiles.
    #[error("quantile pair must satisfy u1 < u2, got u1={u1} u2={u2}")]
    QuantileOrder { u1: f64, u2: f64 },

    /// Malformed input data, annotated with the offending line where known.
    #[error("ingestion error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Ingest { line: Option<u64>, msg: String },

    /// A (group, time) cell absent from the input grid.
    #[error("missing cell group={group} time={time}")]
    MissingCell { group: i64, time: i64 },

    /// Treatment pattern inconsistent with a single policy adoption at t0.
    #[error("design error: {0}")]
    Design(String),

    /// Invalid run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical routine failed (eigen/SVD breakdown, non-finite values).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Too many Monte Carlo replications failed.
    #[error("monte carlo run failed: {failures} of {reps} replications errored (> 5%)")]
    MonteCarloFailures { failures: usize, reps: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wrap a per-cell error with its (group, time, u) coordinates.
    pub fn at_cell(self, group: i64, time: i64, u: f64) -> Error {
        Error::CellFit {
            group,
            time,
            u,
            source: Box::new(self),
        }
    }
}
