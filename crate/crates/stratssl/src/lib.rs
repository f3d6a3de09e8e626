//! Semi-supervised estimation and inference for logistic working models and
//! their predictive accuracy under stratified labeling.

pub mod allocation;
pub mod basis;
pub mod cv;
pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod link;
pub mod metric;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod simulation;
pub mod solver;

pub use error::{Error, Result, Warning};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use allocation::{neyman, Allocation, AllocationInput};
pub use basis::{expand, BasisSpec};
pub use data::{build_design, SamplingDesign, SemiSupervisedDataset};
pub use metric::AccuracyMetric;
pub use pipeline::{analyze, Analysis, AnalysisConfig};
pub use simulation::{run_study, MonteCarloReport, ScenarioId, ScenarioSpec};
