//! JSON experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cpnet_core::knn::KnnBackend;
use cpnet_core::toy::TrainConfig;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cpnet,
    C2d,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Cpnet => "cpnet",
            ModelKind::C2d => "c2d",
        })
    }
}

impl FromStr for ModelKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpnet" => Ok(ModelKind::Cpnet),
            "c2d" => Ok(ModelKind::C2d),
            other => Err(CliError::invalid(format!(
                "unknown model {other:?} (expected cpnet or c2d)"
            ))),
        }
    }
}

/// Training settings plus the files an experiment reads and writes.
/// Every key is optional; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    /// CPDS file to train on; generated from `dataset_seed` when absent.
    pub dataset: Option<PathBuf>,
    pub dataset_seed: u64,
    pub checkpoint: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    pub metrics: Option<PathBuf>,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub k: usize,
    pub seed: u64,
    pub early_stop: bool,
    #[serde(serialize_with = "ser_backend", deserialize_with = "de_backend")]
    pub backend: KnnBackend,
}

fn ser_backend<S: Serializer>(b: &KnnBackend, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&b.to_string())
}

fn de_backend<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<KnnBackend, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            model: ModelKind::Cpnet,
            dataset: None,
            dataset_seed: 0,
            checkpoint: PathBuf::from("model.cpt1"),
            metrics: None,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            batch_size: t.batch_size,
            epochs: t.epochs,
            k: t.k,
            seed: t.seed,
            early_stop: t.early_stop,
            backend: t.backend,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::invalid(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            epochs: self.epochs,
            k: self.k,
            seed: self.seed,
            early_stop: self.early_stop,
            backend: self.backend,
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics
            .clone()
            .unwrap_or_else(|| self.checkpoint.with_extension("csv"))
    }

    /// Checks hyperparameters and every path without reading any data.
    pub fn validate(&self) -> Result<()> {
        self.train_config()
            .validate()
            .map_err(|e| CliError::invalid(format!("invalid training settings: {e}")))?;
        if let Some(ds) = &self.dataset {
            require_file(ds)?;
        }
        require_writable(&self.checkpoint)?;
        require_writable(&self.metrics_path())?;
        if self.checkpoint == self.metrics_path() {
            return Err(CliError::invalid("checkpoint and metrics paths must differ"));
        }
        Ok(())
    }
}

/// An existing regular file.
pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(CliError::invalid(format!("{} is not a readable file", path.display())));
    }
    Ok(())
}

/// A path whose parent directory exists and which is not itself a directory.
pub fn require_writable(path: &Path) -> Result<()> {
    if path.as_os_str().is_empty() || path.is_dir() {
        return Err(CliError::invalid(format!("{} is not a file path", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        if !parent.is_dir() {
            return Err(CliError::invalid(format!(
                "directory {} does not exist",
                parent.display()
            )));
        }
    }
    Ok(())
}
