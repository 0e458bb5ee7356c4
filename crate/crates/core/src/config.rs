//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{NoiseSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { modalities: Vec<PathBuf>, labels: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub train_fraction: f64,
    pub data: DataSource,
    /// Noise applied to the training split. Its `seed` is mixed with each run's noise stream.
    pub train_noise: NoiseSpec,
    pub test_noise: NoiseSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            train_fraction: 0.7,
            data: DataSource::default(),
            train_noise: NoiseSpec::clean(),
            test_noise: NoiseSpec {
                seed: 1,
                ..NoiseSpec::clean()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn config_err(field: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument { field: f, reason } => Error::Config {
            field: format!("{field}.{f}"),
            reason,
        },
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: field_from_toml_error(&e),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            field: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field. A configuration with SACA disabled but TTCE
    /// enabled is rejected rather than silently normalized.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config {
                field: "seeds".into(),
                reason: "at least one seed is required".into(),
            });
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config {
                field: "train_fraction".into(),
                reason: "must lie strictly between 0 and 1".into(),
            });
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate().map_err(|e| config_err("data", e))?,
            DataSource::Csv { modalities, labels } => {
                if modalities.is_empty() {
                    return Err(Error::Config {
                        field: "data.modalities".into(),
                        reason: "at least one modality file is required".into(),
                    });
                }
                for p in modalities.iter().chain(std::iter::once(labels)) {
                    if !p.exists() {
                        return Err(Error::Config {
                            field: if p == labels { "data.labels".into() } else { "data.modalities".into() },
                            reason: format!("{} does not exist", p.display()),
                        });
                    }
                }
            }
        }
        self.train_noise.validate().map_err(|e| config_err("train_noise", e))?;
        self.test_noise.validate().map_err(|e| config_err("test_noise", e))?;
        self.model.validate().map_err(|e| config_err("model", e))?;
        let ab = self.model.ablation;
        if !ab.saca && ab.ttce {
            return Err(Error::Config {
                field: "model.ablation.ttce".into(),
                reason: "enhancement needs the experts; set ttce = false when saca = false".into(),
            });
        }
        self.train.validate().map_err(|e| config_err("train", e))?;
        Ok(())
    }
}

/// Best-effort field name for a TOML decoding error.
fn field_from_toml_error(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "<config>".into()
}
