//! Error and warning types shared across the crate.

use serde::Serialize;
use std::fmt;
use thiserror::Error;

use crate::solver::SolveOutcome;

/// Fatal errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("stratum {stratum} has no labeled units")]
    EmptyStratum { stratum: usize },

    #[error("stratum labels must be contiguous 1..S; found {found:?} (use relabel_strata)")]
    StratumRelabel { found: Vec<usize> },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid value for {field}: {message}")]
    Validation { field: String, message: String },

    #[error("feature column {column} is constant; cannot build a spline on it")]
    DegenerateFeature { column: usize },

    #[error("requested {requested} components but numerical rank is {rank}")]
    Rank { requested: usize, rank: usize },

    #[error("solver did not converge after {} iterations (score norm {:.3e})", .best.iterations, .best.score_norm)]
    NonConvergence { best: Box<SolveOutcome> },

    #[error("singular Jacobian in {context}")]
    SingularJacobian { context: String },

    #[error("no iterate satisfies the constraints (residual {residual:.3e})")]
    ConstraintInfeasible { residual: f64 },

    #[error("stratum {stratum} has {count} labeled units, fewer than {folds} folds")]
    TooFewLabeled { stratum: usize, count: usize, folds: usize },

    #[error("cannot combine estimates: {0}")]
    VariantMismatch(String),

    #[error("{failed} of {total} resampling replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("all stratum standard deviations are zero")]
    AllZeroVariance,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), message: message.into() }
    }

    /// True for errors raised by numerical routines rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::SingularJacobian { .. }
                | Error::ConstraintInfeasible { .. }
                | Error::TooManyFailures { .. }
                | Error::Rank { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Non-fatal conditions recorded alongside results.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    RankDeficient { columns: usize, rank: usize },
    OverflowGuard { clamped: usize },
    DegenerateZ,
    CovarianceDegenerate { coordinate: usize },
    ExtremeTilt { max_ratio: f64 },
    FoldRetried { replication: usize, fold: usize },
    ReplicationDropped { replication: usize, reason: String },
    ReplicateFailed { replicate: usize, reason: String },
    SolverStalled { context: String },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::RankDeficient { columns, rank } => {
                write!(f, "basis with {columns} columns has numerical rank {rank}")
            }
            Warning::OverflowGuard { clamped } => {
                write!(f, "{clamped} exponent arguments clamped at +/-30")
            }
            Warning::DegenerateZ => write!(f, "augmentation column constant; intercept-only fallback"),
            Warning::CovarianceDegenerate { coordinate } => {
                write!(f, "degenerate covariance for coordinate {coordinate}; weight set to 1/2")
            }
            Warning::ExtremeTilt { max_ratio } => {
                write!(f, "density-ratio tilt up to {max_ratio:.2}x the design weight")
            }
            Warning::FoldRetried { replication, fold } => {
                write!(f, "fold {fold} of replication {replication} retried with doubled ridge")
            }
            Warning::ReplicationDropped { replication, reason } => {
                write!(f, "replication {replication} dropped: {reason}")
            }
            Warning::ReplicateFailed { replicate, reason } => {
                write!(f, "resampling replicate {replicate} failed: {reason}")
            }
            Warning::SolverStalled { context } => {
                write!(f, "{context}: descent stalled; using the best feasible iterate")
            }
        }
    }
}
