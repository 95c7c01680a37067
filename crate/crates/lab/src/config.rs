//! The JSON run configuration. Every field has a default, unknown keys are
//! rejected, and command-line flags are merged in before the resolved
//! document is echoed next to the outputs.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use akd_core::avatar::{AvatarConfig, Perturbation};
use akd_core::data::ToyDatasetSpec;
use akd_core::distill::{LossKind, SoftmaxAxes};
use akd_core::nn::{STUDENT_WIDTH, TEACHER_WIDTH};
use akd_core::train::{DistillMode, ExperimentConfig, SgdConfig, SigmaSource};
use akd_core::uncertainty::MergeMode;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

pub const FORMAT_VERSION: u32 = 1;

/// Serde adapter for the core enums, which parse from and print to their
/// lowercase names.
mod named {
    use super::*;
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub format_version: u32,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub distill: DistillSection,
    pub ablation: AblationConfig,
    pub ensemble: EnsembleConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            format_version: FORMAT_VERSION,
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            distill: DistillSection::default(),
            ablation: AblationConfig::default(),
            ensemble: EnsembleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub bump_width: f64,
    pub amplitude: f64,
    pub amplitude_jitter: f64,
    pub edge_offset: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::from(&ToyDatasetSpec::default())
    }
}

impl From<&ToyDatasetSpec> for DatasetConfig {
    fn from(s: &ToyDatasetSpec) -> Self {
        DatasetConfig {
            n_train: s.n_train,
            n_test: s.n_test,
            classes: s.classes,
            seed: s.seed,
            noise_std: s.noise_std,
            bump_width: s.bump_width,
            amplitude: s.amplitude,
            amplitude_jitter: s.amplitude_jitter,
            edge_offset: s.edge_offset,
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> ToyDatasetSpec {
        ToyDatasetSpec {
            n_train: self.n_train,
            n_test: self.n_test,
            classes: self.classes,
            seed: self.seed,
            noise_std: self.noise_std,
            bump_width: self.bump_width,
            amplitude: self.amplitude,
            amplitude_jitter: self.amplitude_jitter,
            edge_offset: self.edge_offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub teacher_width: usize,
    pub student_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            teacher_width: TEACHER_WIDTH,
            student_width: STUDENT_WIDTH,
        }
    }
}

/// Optimizer settings shared by teacher and student training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed of the teacher's initialization and batch order.
    pub teacher_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = SgdConfig::default();
        TrainConfig {
            learning_rate: s.learning_rate,
            momentum: s.momentum,
            epochs: s.epochs,
            batch_size: s.batch_size,
            teacher_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    #[serde(with = "named")]
    pub mode: DistillMode,
    #[serde(with = "named")]
    pub loss: LossKind,
    #[serde(with = "named")]
    pub kl_axes: SoftmaxAxes,
    #[serde(with = "named")]
    pub merge: MergeMode,
    #[serde(with = "named")]
    pub sigma_source: SigmaSource,
    #[serde(with = "named")]
    pub perturbation: Perturbation,
    pub alpha: f64,
    pub k: usize,
    pub m: f64,
    pub per_avatar_ratios: Option<Vec<f64>>,
    /// Seed of the student and of its avatar streams.
    pub seed: u64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        DistillSection {
            mode: e.mode,
            loss: e.loss_kind,
            kl_axes: e.kl_axes,
            merge: e.merge_mode,
            sigma_source: e.sigma_source,
            perturbation: e.avatars.perturbation,
            alpha: e.alpha,
            k: e.avatars.count,
            m: e.avatars.dropout_ratio,
            per_avatar_ratios: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: usize,
    pub first_seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: 10,
            first_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub k: Vec<usize>,
    pub m: f64,
    pub seeds: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            k: vec![1, 3, 5, 10],
            m: 0.1,
            seeds: 20,
        }
    }
}

impl CliConfig {
    /// Parses a config document; serde names any unknown or mistyped key.
    pub fn from_json(text: &str) -> LabResult<CliConfig> {
        let cfg: CliConfig = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> LabResult<CliConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        CliConfig::from_json(&text).map_err(|e| match e {
            LabError::Config(d) => LabError::Config(format!("{}: {d}", path.display())),
            other => other,
        })
    }

    /// The file at `path`, or the defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> LabResult<CliConfig> {
        path.map_or_else(|| Ok(CliConfig::default()), CliConfig::load)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |key: &str, e: akd_core::Error| LabError::Config(format!("{key}: {e}"));
        if self.format_version != FORMAT_VERSION {
            return Err(LabError::Config(format!(
                "format_version: expected {FORMAT_VERSION}, got {}",
                self.format_version
            )));
        }
        self.dataset.spec().validate(self.train.batch_size).map_err(|e| bad("dataset", e))?;
        self.train.sgd().validate().map_err(|e| bad("train", e))?;
        if self.network.teacher_width == 0 || self.network.student_width == 0 {
            return Err(LabError::Config("network: widths must be positive".into()));
        }
        self.experiment(self.distill.seed).validate().map_err(|e| bad("distill", e))?;
        if self.ensemble.k.is_empty() || self.ensemble.k.contains(&0) {
            return Err(LabError::Config("ensemble.k: need one or more positive counts".into()));
        }
        if self.ensemble.seeds == 0 || self.ablation.seeds == 0 {
            return Err(LabError::Config("seeds: counts must be positive".into()));
        }
        Ok(())
    }

    /// The distillation run described by the `distill` section with the
    /// given student seed. The avatar streams share the seed.
    pub fn experiment(&self, seed: u64) -> ExperimentConfig {
        let d = &self.distill;
        ExperimentConfig {
            mode: d.mode,
            loss_kind: d.loss,
            kl_axes: d.kl_axes,
            merge_mode: d.merge,
            sigma_source: d.sigma_source,
            avatars: AvatarConfig {
                count: d.k,
                dropout_ratio: d.m,
                per_avatar_ratios: d.per_avatar_ratios.clone(),
                seed,
                perturbation: d.perturbation,
            },
            alpha: d.alpha,
            sgd: self.train.sgd(),
            student_width: self.network.student_width,
            seed,
        }
    }
}
