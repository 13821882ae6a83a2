//! Experiment driver: synthetic data, configuration, the active-learning loop,
//! curves and ledgers.

pub mod config;
pub mod curves;
pub mod driver;
pub mod generator;
pub mod ledger;

pub use config::{ExperimentConfig, LearnerConfig};
pub use curves::{average_curves, performance_index, ALCurve, CurvePoint, PerformanceIndex};
pub use driver::{
    build_learner, dataset_fingerprint, load_data, load_results, run_experiment, run_reference, validation_miou,
    ExperimentResult, ReferenceResult, RepetitionResult, RunOptions, Summary,
};
pub use generator::{generate, GeneratorSpec};
