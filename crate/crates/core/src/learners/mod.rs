//! Learner contract and implementations.
//!
//! A learner is retrained from scratch on masked supervision each round, predicts
//! per-pixel class posteriors (optionally as a stochastic committee) and regresses
//! per-pixel click costs. [`BuiltinLearner`] runs in process; [`ExternalLearner`]
//! delegates to a worker process over a JSON-lines protocol.

mod builtin;
pub mod dmt;
mod external;
pub mod protocol;
mod worker;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cost::CostMap;
use crate::error::Result;
use crate::info::{CommitteePrediction, ProbabilityMap};
use crate::pool::{ClassId, Dataset, ImageRecord, LabelMask};

pub use builtin::{BuiltinConfig, BuiltinLearner, CostRegressor, SoftmaxRegression, Standardizer};
pub use external::{ExternalConfig, ExternalLearner};
pub use worker::serve;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Builtin,
    External,
}

/// Outcome of one from-scratch training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Best validation mIoU (segmentation training).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_miou: Option<f64>,
    /// Best validation mean squared error (cost training).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_mse: Option<f64>,
    /// True when early stopping fired before the epoch cap.
    pub converged: bool,
    /// Training loss after each epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
}

/// One image's supervision: labels count only where `mask` is true.
#[derive(Clone, Copy, Debug)]
pub struct SegSample<'a> {
    pub image: &'a ImageRecord,
    pub labels: &'a Array2<ClassId>,
    pub mask: &'a LabelMask,
}

#[derive(Clone, Debug)]
pub struct SegJob<'a> {
    pub num_classes: usize,
    pub train: Vec<SegSample<'a>>,
    /// Fully labeled validation images for early stopping.
    pub val: &'a Dataset,
    pub seed: u64,
}

/// Click targets for one image; `mask = None` means every pixel counts.
#[derive(Clone, Copy, Debug)]
pub struct CostSample<'a> {
    pub image: &'a ImageRecord,
    pub clicks: &'a Array2<f64>,
    pub mask: Option<&'a LabelMask>,
}

#[derive(Clone, Debug)]
pub struct CostJob<'a> {
    pub train: Vec<CostSample<'a>>,
    pub val: Vec<CostSample<'a>>,
    pub seed: u64,
}

pub trait Learner: Send + Sync {
    fn kind(&self) -> LearnerKind;

    /// Whether segmentation predictions are available.
    fn is_trained(&self) -> bool;

    /// Retrains the segmentation model from scratch with masked cross-entropy.
    fn train_segmentation(&mut self, job: &SegJob<'_>) -> Result<TrainReport>;

    fn predict_probs(&self, image: &ImageRecord) -> Result<ProbabilityMap<f64>>;

    /// `members` stochastic forward passes; member `k` is seeded from `(seed, k)`.
    fn predict_committee(&self, image: &ImageRecord, members: usize, seed: u64) -> Result<CommitteePrediction<f64>>;

    /// Retrains the cost regressor from scratch with masked squared error.
    fn train_cost(&mut self, job: &CostJob<'_>) -> Result<TrainReport>;

    fn predict_cost(&self, image: &ImageRecord) -> Result<CostMap>;
}

pub type LearnerHandle = Box<dyn Learner>;
