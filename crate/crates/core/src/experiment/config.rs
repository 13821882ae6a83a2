//! Experiment configuration: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generator::GeneratorSpec;
use crate::acquisition::{AcquisitionConfig, Measure};
use crate::cost::CostMode;
use crate::error::{Error, Result};
use crate::learners::{BuiltinConfig, ExternalConfig, LearnerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub builtin: BuiltinConfig,
    pub external: ExternalConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            kind: LearnerKind::Builtin,
            builtin: BuiltinConfig::default(),
            external: ExternalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic dataset; ignored when `data_dir` is set.
    pub dataset: GeneratorSpec,
    /// Previously generated dataset to load instead of generating in memory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Fully labeled images before the first round.
    pub seed_images: usize,
    pub acquisition: AcquisitionConfig,
    pub cost_mode: CostMode,
    pub repetitions: usize,
    pub max_rounds: usize,
    pub rng_seed: u64,
    pub learner: LearnerConfig,
    /// Committee members for vote entropy.
    pub committee_size: usize,
    pub cost_target_downscale: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: GeneratorSpec::default(),
            data_dir: None,
            seed_images: 2,
            acquisition: AcquisitionConfig::default(),
            cost_mode: CostMode::Oracle,
            repetitions: 5,
            max_rounds: 40,
            rng_seed: 0,
            learner: LearnerConfig::default(),
            committee_size: 8,
            cost_target_downscale: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that does not need the dataset itself.
    pub fn validate(&self) -> Result<()> {
        if self.data_dir.is_none() {
            self.dataset.validate()?;
        }
        self.acquisition.validate()?;
        self.learner.builtin.validate()?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.seed_images == 0 {
            return Err(Error::Config("seed_images must be at least 1".into()));
        }
        if self.cost_target_downscale == 0 {
            return Err(Error::Config("cost_target_downscale must be positive".into()));
        }
        if self.acquisition.measure == Measure::VoteEntropy && self.committee_size < 2 {
            return Err(Error::Config("vote entropy needs a committee of at least 2".into()));
        }
        match (self.cost_mode, self.learner.kind) {
            (CostMode::External, LearnerKind::Builtin) => {
                return Err(Error::Config("cost_mode external requires the external learner".into()))
            }
            (CostMode::Builtin, LearnerKind::External) => {
                return Err(Error::Config("cost_mode builtin requires the builtin learner".into()))
            }
            _ => {}
        }
        if self.learner.kind == LearnerKind::External && self.learner.external.command.is_empty() {
            return Err(Error::Config("external learner needs a worker command".into()));
        }
        Ok(())
    }

    /// Checks that depend on the loaded dataset.
    pub fn validate_against(&self, train_images: usize, height: usize, width: usize) -> Result<()> {
        if self.seed_images > train_images {
            return Err(Error::Config(format!(
                "seed_images {} exceeds the {train_images} training images",
                self.seed_images
            )));
        }
        if let (true, Some(w)) = (self.acquisition.strategy.is_region(), self.acquisition.region_size) {
            if w > height || w > width {
                return Err(Error::Config(format!("region size {w} exceeds the {height}x{width} images")));
            }
        }
        Ok(())
    }

    /// Whether the round needs cost maps from the learner.
    pub fn needs_cost_model(&self) -> bool {
        self.acquisition.strategy.is_scored()
            && self.acquisition.strategy.is_region()
            && self.acquisition.fusion.uses_cost()
            && self.cost_mode != CostMode::Oracle
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::Strategy;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
        let round = ExperimentConfig::from_json(&ExperimentConfig::default().to_json()).unwrap();
        assert_eq!(round, ExperimentConfig::default());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"repetitons": 3}"#), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"repetitions": 0}"#), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"cost_mode": "external"}"#),
            Err(Error::Config(_))
        ));
        let text = r#"{"acquisition": {"strategy": "region_score", "region_size": null}}"#;
        assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn partial_document_keeps_other_defaults() {
        let c = ExperimentConfig::from_json(r#"{"acquisition": {"strategy": "image_random"}, "max_rounds": 3}"#).unwrap();
        assert_eq!(c.acquisition.strategy, Strategy::ImageRandom);
        assert_eq!(c.max_rounds, 3);
        assert_eq!(c.seed_images, 2);
        assert!(c.validate_against(1, 128, 128).is_err());
    }
}
