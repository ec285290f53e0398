//! Experiment configuration (strict JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Augment, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::memory::{Budget, Selection};
use crate::network::NetworkConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Idx(IdxPaths),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub stages: usize,
    #[serde(default = "yes")]
    pub initial_half: bool,
    #[serde(default)]
    pub order_seed: u64,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Estimated importance weights.
    #[default]
    Afc,
    /// `Ĩ ≡ 1`.
    Uniform,
    /// No discrepancy term.
    Finetune,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "afc" => Ok(BaselineMode::Afc),
            "uniform" => Ok(BaselineMode::Uniform),
            "finetune" => Ok(BaselineMode::Finetune),
            _ => Err(Error::Config(format!("unknown mode {s:?} (afc, uniform, finetune)"))),
        }
    }
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMode::Afc => "afc",
            BaselineMode::Uniform => "uniform",
            BaselineMode::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: Augment,
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_wd(),
            seed: 0,
            augment: Augment::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    #[serde(default = "default_importance_batch")]
    pub batch_size: usize,
    /// Cap on examples per estimate; `None` means all of `D^t ∪ E^t`.
    #[serde(default)]
    pub sample_limit: Option<usize>,
    #[serde(default)]
    pub train_mode_bn: bool,
}

fn default_importance_batch() -> usize {
    64
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            batch_size: default_importance_batch(),
            sample_limit: None,
            train_mode_bn: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    #[serde(default = "default_budget")]
    pub budget: Budget,
    #[serde(default)]
    pub selection: Selection,
}

fn default_budget() -> Budget {
    Budget::PerClass(20)
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            budget: default_budget(),
            selection: Selection::Herding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub plan: PlanConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub importance: ImportanceConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub mode: BaselineMode,
    /// Not part of the configuration hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config {} does not exist", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::from_json(&text)?;
        if let DatasetConfig::Idx(p) = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for f in [&mut p.train_images, &mut p.train_labels, &mut p.test_images, &mut p.test_labels] {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
                if !f.is_file() {
                    return Err(Error::Config(format!("dataset file {} does not exist", f.display())));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr = {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.momentum) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("train.momentum in [0, 1) and weight_decay >= 0 required".into()));
        }
        if self.importance.batch_size == 0 || self.importance.sample_limit == Some(0) {
            return Err(Error::Config("importance.batch_size and sample_limit must be positive".into()));
        }
        if matches!(self.memory.budget, Budget::PerClass(0) | Budget::Total(0)) {
            return Err(Error::Config("memory.budget must be positive".into()));
        }
        if self.plan.stages == 0 {
            return Err(Error::Config("plan.stages must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, without `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn num_classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.num_classes,
            DatasetConfig::Idx(p) => p.num_classes,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => data::make_synthetic(s),
            DatasetConfig::Idx(p) => {
                let train = data::load_idx_dataset(&p.train_images, &p.train_labels, p.num_classes)?;
                let test = data::load_idx_dataset(&p.test_images, &p.test_labels, p.num_classes)?;
                Dataset::new(train, test, p.num_classes)
            }
        }
    }

    /// Sets a dotted key (`loss.lambda_disc`, `train.seed`, …) from a JSON
    /// literal or bare string.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let cfg: ExperimentConfig = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"synthetic": {"num_classes": 4, "train_per_class": 6, "test_per_class": 2, "image_size": 8}},
        "plan": {"stages": 2}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.loss.lambda_disc, 4.0);
        assert_eq!(c.network.proxies_per_class, 10);
        assert_eq!(c.network.delta, 0.6);
        assert_eq!(c.memory.budget, Budget::PerClass(20));
        assert_eq!(c.mode, BaselineMode::Afc);
        assert!(c.plan.initial_half);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"plan\"", "\"plann\"");
        assert!(ExperimentConfig::from_json(&bad).unwrap_err().is_config());
        let bad = MINIMAL.replace("\"stages\": 2", "\"stages\": 2, \"extra\": 1");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn overrides() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(a.with_override("loss.lambda_disc", "2").unwrap().loss.lambda_disc, 2.0);
        assert_eq!(a.with_override("mode", "finetune").unwrap().mode, BaselineMode::Finetune);
        assert!(a.with_override("loss.nope", "1").unwrap_err().is_config());
        assert!(a.with_override("train.epochs", "0").is_err());
    }

    #[test]
    fn budget_spelling() {
        let c: MemoryConfig = serde_json::from_str(r#"{"budget": {"total": 2000}, "selection": "random"}"#).unwrap();
        assert_eq!(c.budget, Budget::Total(2000));
        assert_eq!(c.selection, Selection::Random);
    }
}
