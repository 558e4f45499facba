//! Experiment configuration files: JSON in, canonical JSON echo out.
//!
//! Unknown keys are rejected and every default is materialized in the echoed
//! form, so a run is fully auditable from its `config.json` alone.

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::fed::PartitionStrategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub architecture: ArchitectureConfig,
    pub dropout: DropoutConfig,
    pub federation: FederationConfig,
    pub kd: DistillConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: Vec<u64>,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskConfig::default(),
            architecture: ArchitectureConfig::default(),
            dropout: DropoutConfig::default(),
            federation: FederationConfig::default(),
            kd: DistillConfig::disabled(),
            optimizer: OptimizerConfig::default(),
            seeds: vec![1, 2, 3],
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub train_samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub dim: usize,
    pub noise: f64,
    /// IDX file paths for `kind = "idx"`.
    pub idx_images: Option<String>,
    pub idx_labels: Option<String>,
    pub idx_test_images: Option<String>,
    pub idx_test_labels: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Synthesized 28x28 digit glyphs, materialized as IDX files.
    Digits,
    Blobs,
    Rings,
    /// Pre-existing IDX files named in `idx_images` / `idx_labels`.
    Idx,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::Digits,
            train_samples: 8000,
            test_samples: 2000,
            classes: 10,
            dim: 16,
            noise: 0.08,
            idx_images: None,
            idx_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub kind: ArchKind,
    pub hidden: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    FemnistCnn,
    Mlp,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            kind: ArchKind::FemnistCnn,
            hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutConfig {
    /// Uniform candidate set `{1/k, ..., 1}`.
    pub k: usize,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: u64,
    /// Local iterations per round; null runs one local epoch.
    pub local_iters: Option<usize>,
    pub participation: f64,
    pub clients: usize,
    pub drop_scale: f64,
    pub partition: PartitionStrategy,
    pub momentum: f64,
    /// Step the learning rate down by 10x at 50% and 75% of the rounds.
    pub schedule_decay: bool,
    pub eval_every: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 200,
            local_iters: None,
            participation: 0.1,
            clients: 100,
            drop_scale: 1.0,
            partition: PartitionStrategy::Iid,
            momentum: 0.0,
            schedule_decay: true,
            eval_every: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Centralized passes over the training set.
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            momentum: 0.5,
            batch_size: 128,
            epochs: 6,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical form: every field explicit, stable key order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("need at least one seed".into()));
        }
        if self.dropout.k == 0 {
            return Err(Error::InvalidConfig("dropout.k must be at least 1".into()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::InvalidConfig("optimizer.lr must be positive".into()));
        }
        if self.optimizer.batch_size == 0 || self.optimizer.epochs == 0 {
            return Err(Error::InvalidConfig(
                "optimizer.batch_size and epochs must be positive".into(),
            ));
        }
        if self.task.classes < 2 {
            return Err(Error::InvalidConfig("task.classes must be at least 2".into()));
        }
        if !(self.federation.participation > 0.0 && self.federation.participation <= 1.0) {
            return Err(Error::InvalidConfig(
                "federation.participation must lie in (0, 1]".into(),
            ));
        }
        self.kd.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_and_reparse_identically() {
        let cfg = ExperimentConfig::default();
        let echo = cfg.canonical_json();
        let back = ExperimentConfig::from_json(&echo).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.canonical_json(), echo);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = r#"{"task": {"kind": "blobs", "bogus": 1}}"#;
        assert!(ExperimentConfig::from_json(json).is_err());
        let json = r#"{"not_a_section": {}}"#;
        assert!(ExperimentConfig::from_json(json).is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"dropout": {"k": 10}}"#).unwrap();
        assert_eq!(cfg.dropout.k, 10);
        assert_eq!(cfg.federation.rounds, 200);
        assert_eq!(cfg.optimizer.lr, 0.1);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"dropout": {"k": 0}}"#).is_err());
        assert!(
            ExperimentConfig::from_json(r#"{"federation": {"participation": 0.0}}"#).is_err()
        );
    }
}
