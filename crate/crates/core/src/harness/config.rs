use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agm::{TrainConfig, TrainMethod};
use crate::concept::Padding;
use crate::data::{self, Dataset, SplitFractions, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::{FusionSpec, ModalitySpec, ModelSpec};
use crate::probe::DEFAULT_LAMBDA;
use crate::tensor::SgdConfig;

/// Environment variable that replaces the configured seed list.
pub const SEED_ENV: &str = "MODFORGE_SEED";

/// Exactly one of the three sources must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetSource {
    pub fn builtin(name: &str) -> Self {
        DatasetSource { builtin: Some(name.into()), path: None, synthetic: None }
    }

    fn validate(&self) -> Result<()> {
        let set = [self.builtin.is_some(), self.path.is_some(), self.synthetic.is_some()];
        if set.iter().filter(|&&b| b).count() != 1 {
            return Err(Error::Config(
                "dataset: set exactly one of `builtin`, `path`, `synthetic`".into(),
            ));
        }
        if let Some(name) = &self.builtin {
            data::benchmark(name)?;
        }
        if let Some(spec) = &self.synthetic {
            spec.validate()?;
        }
        Ok(())
    }

    /// Generates or loads the dataset.
    pub fn resolve(&self) -> Result<Dataset> {
        self.validate()?;
        if let Some(name) = &self.builtin {
            return data::generate(&data::benchmark(name)?);
        }
        if let Some(spec) = &self.synthetic {
            return data::generate(spec);
        }
        let path = self.path.as_ref().expect("validated");
        data::format::load(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    LateSum,
    EarlyMaxout,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_fusion_hidden() -> usize {
    32
}
fn default_pieces() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: FusionKind,
    /// Hidden widths used by every encoder unless overridden.
    #[serde(default = "default_hidden")]
    pub encoder_hidden: Vec<usize>,
    /// Per-modality overrides of `encoder_hidden`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub encoders: BTreeMap<String, Vec<usize>>,
    #[serde(default = "default_fusion_hidden")]
    pub fusion_hidden_dim: usize,
    #[serde(default = "default_pieces")]
    pub maxout_pieces: usize,
}

impl ModelConfig {
    pub fn fusion_spec(&self) -> FusionSpec {
        match self.fusion {
            FusionKind::LateSum => FusionSpec::LateSum,
            FusionKind::EarlyMaxout => FusionSpec::EarlyMaxout {
                fusion_hidden_dim: self.fusion_hidden_dim,
                maxout_pieces: self.maxout_pieces,
            },
        }
    }

    /// Builds the model spec matching `dataset`.
    pub fn model_spec(&self, dataset: &Dataset, seed: u64) -> Result<ModelSpec> {
        for name in self.encoders.keys() {
            dataset
                .modality_index(name)
                .map_err(|_| Error::Config(format!("model.encoders.{name}: no such modality in dataset")))?;
        }
        let modalities = dataset
            .modality_names()
            .iter()
            .zip(dataset.dims())
            .map(|(name, dim)| {
                let hidden = self.encoders.get(name).unwrap_or(&self.encoder_hidden).clone();
                ModalitySpec::new(name.clone(), dim, hidden)
            })
            .collect();
        Ok(ModelSpec {
            modalities,
            fusion: self.fusion_spec(),
            num_classes: dataset.num_classes(),
            seed,
        })
    }
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_alpha() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_padding() -> Padding {
    Padding::Zero
}

/// A complete experiment, usually read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub method: TrainMethod,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Probe every N epochs during training; 0 disables.
    #[serde(default)]
    pub probe_every: usize,
    /// Padding used when training early-fusion concepts.
    #[serde(default = "default_padding")]
    pub concept_padding: Padding,
    #[serde(default)]
    pub splits: SplitFractions,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it stay relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(p) = &cfg.dataset.path {
            if p.is_relative() {
                cfg.dataset.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds contains duplicates".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.model.encoder_hidden.contains(&0) || self.model.encoders.values().any(|h| h.contains(&0)) {
            return Err(Error::Config("model: encoder widths must be positive".into()));
        }
        if self.model.fusion == FusionKind::EarlyMaxout && (self.model.fusion_hidden_dim == 0 || self.model.maxout_pieces < 2) {
            return Err(Error::Config("model: fusion_hidden_dim must be positive and maxout_pieces at least 2".into()));
        }
        self.splits.validate()?;
        self.train_config(0).validate()
    }

    /// Applies `MODFORGE_SEED` (comma-separated seeds) if it is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        let Some(value) = value else { return Ok(()) };
        let seeds = value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}: invalid seed {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut next = self.clone();
        next.seeds = seeds;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        let value = std::env::var(SEED_ENV).ok();
        self.apply_seed_override(value.as_deref())
    }

    /// Trainer settings for the multi-modal model under `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            method: self.method,
            alpha: self.alpha,
            epochs: self.epochs,
            sgd: self.sgd.clone(),
            batch_size: self.batch_size,
            seed,
        }
    }

    /// Concepts use the same environment but plain cross-entropy.
    pub fn concept_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { method: TrainMethod::JointTrain, ..self.train_config(seed) }
    }
}
