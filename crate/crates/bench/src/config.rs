//! TOML experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gapbench::matcheval::EvalConfig;
use gapbench::protocol::{SplitSpec, SubsampleMode};
use gapbench::siamdet::{DetectorConfig, TrainConfig};
use gapbench::synthworld::SceneConfig;
use serde::{Deserialize, Serialize};

use crate::error::BenchError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(rename = "condition")]
    pub conditions: Vec<ConditionConfig>,
    #[serde(default = "default_variants", rename = "variant")]
    pub variants: Vec<VariantConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn one() -> usize {
    1
}

/// Where the train and evaluation pools come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A named synthetic preset; its seed is the experiment seed.
    Preset {
        name: String,
        n_train_images: usize,
        n_eval_images: usize,
    },
    /// An explicit scene configuration; its `seed` field is replaced by the
    /// experiment seed.
    Synthetic {
        scene: SceneConfig,
        n_train_images: usize,
        n_eval_images: usize,
    },
    /// COCO-style annotation files with rasters under `image_root`.
    Files {
        train_annotations: PathBuf,
        eval_annotations: PathBuf,
        image_root: PathBuf,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    #[serde(flatten)]
    pub spec: SplitSpec,
    /// Splits to run; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
}

impl SplitConfig {
    pub fn selected(&self) -> Vec<usize> {
        match &self.indices {
            Some(ix) => ix.clone(),
            None => (0..self.spec.n_splits).collect(),
        }
    }
}

/// One training-set construction; its subsample seed is derived from the
/// experiment seed and the split, so conditions at equal fractions share
/// their category subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub name: String,
    pub mode: SubsampleMode,
    pub fraction: f64,
    #[serde(default)]
    pub per_category_quota: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub k_shots: usize,
    /// Blank the evaluation references.
    #[serde(default)]
    pub empty_refs: bool,
    /// Use a model trained on blank references.
    #[serde(default)]
    pub train_empty_refs: bool,
    /// Restrict the variant to these conditions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<String>>,
}

impl VariantConfig {
    pub fn applies_to(&self, condition: &str) -> bool {
        self.conditions
            .as_ref()
            .is_none_or(|c| c.iter().any(|n| n == condition))
    }
}

fn default_variants() -> Vec<VariantConfig> {
    vec![VariantConfig {
        name: "one_shot".into(),
        k_shots: 1,
        empty_refs: false,
        train_empty_refs: false,
        conditions: None,
    }]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let cfg: Self = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, BenchError> {
        toml::to_string(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let config = |e: gapbench::Error| BenchError::Config(e.to_string());
        if self.schema_version != SCHEMA_VERSION {
            return Err(BenchError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.workers == 0 {
            return Err(BenchError::Config("workers must be at least 1".into()));
        }
        match &self.dataset {
            DatasetSource::Preset {
                name,
                n_train_images,
                n_eval_images,
            } => {
                SceneConfig::preset(name, self.seed)
                    .ok_or_else(|| BenchError::Config(format!("unknown preset {name:?}")))?;
                check_pools(*n_train_images, *n_eval_images)?;
            }
            DatasetSource::Synthetic {
                scene,
                n_train_images,
                n_eval_images,
            } => {
                scene.validate().map_err(config)?;
                check_pools(*n_train_images, *n_eval_images)?;
            }
            DatasetSource::Files {
                train_annotations,
                eval_annotations,
                image_root,
            } => {
                for p in [train_annotations, eval_annotations, image_root] {
                    if !p.exists() {
                        return Err(BenchError::Config(format!(
                            "{} does not exist",
                            p.display()
                        )));
                    }
                }
            }
        }
        if self.split.spec.n_splits == 0 {
            return Err(BenchError::Config("n_splits must be positive".into()));
        }
        let selected = self.split.selected();
        if selected.is_empty() || selected.iter().any(|&i| i >= self.split.spec.n_splits) {
            return Err(BenchError::Config(format!(
                "split indices {selected:?} must be non-empty and below {}",
                self.split.spec.n_splits
            )));
        }
        if self.conditions.is_empty() || self.variants.is_empty() {
            return Err(BenchError::Config(
                "need at least one condition and one variant".into(),
            ));
        }
        unique_names(self.conditions.iter().map(|c| c.name.as_str()), "condition")?;
        unique_names(self.variants.iter().map(|v| v.name.as_str()), "variant")?;
        for c in &self.conditions {
            if !(c.fraction > 0.0 && c.fraction <= 1.0) {
                return Err(BenchError::Config(format!(
                    "condition {}: fraction {} must lie in (0, 1]",
                    c.name, c.fraction
                )));
            }
        }
        for v in &self.variants {
            if v.k_shots == 0 {
                return Err(BenchError::Config(format!(
                    "variant {}: k_shots must be >= 1",
                    v.name
                )));
            }
            if let Some(names) = &v.conditions {
                if let Some(n) = names
                    .iter()
                    .find(|n| !self.conditions.iter().any(|c| &c.name == *n))
                {
                    return Err(BenchError::Config(format!(
                        "variant {} names unknown condition {n}",
                        v.name
                    )));
                }
            }
        }
        self.train.validate().map_err(config)?;
        self.detector.validate().map_err(config)?;
        self.eval.validate().map_err(config)?;
        Ok(())
    }

    /// The scene configuration for synthetic sources.
    pub fn scene(&self) -> Option<SceneConfig> {
        match &self.dataset {
            DatasetSource::Preset { name, .. } => SceneConfig::preset(name, self.seed),
            DatasetSource::Synthetic { scene, .. } => Some(SceneConfig {
                seed: self.seed,
                ..scene.clone()
            }),
            DatasetSource::Files { .. } => None,
        }
    }
}

fn check_pools(n_train: usize, n_eval: usize) -> Result<(), BenchError> {
    if n_train == 0 || n_eval == 0 {
        return Err(BenchError::Config(
            "train and eval pools must be non-empty".into(),
        ));
    }
    Ok(())
}

fn unique_names<'a>(names: impl Iterator<Item = &'a str>, what: &str) -> Result<(), BenchError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if n.is_empty()
            || !n
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        {
            return Err(BenchError::Config(format!(
                "{what} name {n:?} must be non-empty [A-Za-z0-9_.-]"
            )));
        }
        if !seen.insert(n) {
            return Err(BenchError::Config(format!("duplicate {what} name {n}")));
        }
    }
    Ok(())
}
