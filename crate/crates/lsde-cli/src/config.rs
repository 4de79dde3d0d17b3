//! Experiment configuration: one JSON document describing the dataset,
//! the model, the training schedule, and the evaluation mode. Every
//! random quantity traces to an explicit seed; absent seeds default to
//! zero and are echoed back when the resolved config is written.

use lsde::datasets::{MapConfig, NoiseKind};
use lsde::eval::AlignMode;
use lsde::io::TimesSpec;
use lsde::vae::{TrainConfig, VaeConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetBlock {
    /// Catalog name of the generating SDE.
    pub sde: String,
    pub map: MapConfig,
    #[serde(default = "default_one")]
    pub n_trajectories: usize,
    pub times: TimesSpec,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default)]
    pub rescale: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EvaluationBlock {
    #[serde(default)]
    pub mode: AlignMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetBlock,
    pub model: VaeConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationBlock,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> lsde::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> lsde::Result<()> {
        // The SDE must exist and its dimension must match the map input.
        let spec = lsde::sde::catalog(&self.dataset.sde)?;
        if spec.dim != self.dataset.map.latent_dim {
            return Err(lsde::Error::InvalidInput(format!(
                "SDE '{}' is {}-dimensional but the map expects latent dimension {}",
                self.dataset.sde, spec.dim, self.dataset.map.latent_dim
            )));
        }
        if self.model.ambient_dim != self.dataset.map.ambient_dim {
            return Err(lsde::Error::InvalidInput(format!(
                "model ambient width {} does not match the map's ambient dimension {}",
                self.model.ambient_dim, self.dataset.map.ambient_dim
            )));
        }
        Ok(())
    }

    /// Serialize the resolved config (defaults filled in) to a file.
    pub fn write(&self, path: &Path) -> lsde::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
