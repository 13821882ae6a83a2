//! Cost-aware, region-based active learning for dense semantic segmentation.
//!
//! The crate scores fixed-size square regions of an unlabeled image pool by an
//! information/cost trade-off, queries a simulated annotator with exact click
//! accounting, retrains a pluggable learner and reports annotation-effort curves.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the precision used by the experiment driver.

pub mod acquisition;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod info;
pub mod learners;
pub mod metrics;
pub mod oracle;
pub mod pool;
pub mod region;
pub mod scalar;
pub mod seeding;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision of the experiment pipeline.
pub type Real = f64;

pub type ProbabilityMap64 = info::ProbabilityMap<f64>;
pub type ProbabilityMap32 = info::ProbabilityMap<f32>;
pub type InformationMap64 = info::InformationMap<f64>;
pub type InformationMap32 = info::InformationMap<f32>;
pub type CommitteePrediction64 = info::CommitteePrediction<f64>;
pub type RegionMap64 = region::RegionMap<f64>;
pub type RegionMap32 = region::RegionMap<f32>;
pub type RegionProposal64 = region::RegionProposal<f64>;
