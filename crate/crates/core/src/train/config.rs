use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{FusionMode, InputNorm, ModelConfig};

fn default_embed_dim() -> usize {
    64
}

/// Model section of the training file. `modalities` and `classes` may be
/// left out and are then taken from the training data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modalities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub input_norm: InputNorm,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            modalities: None,
            classes: None,
            encoder: EncoderConfig::default(),
            embed_dim: default_embed_dim(),
            input_norm: InputNorm::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// Exponent of the polynomial decay.
    pub power: f64,
    /// Fraction of all steps spent in linear warm-up.
    pub warmup_frac: f64,
    /// Warm-up starts at `warmup_start · base_lr`.
    pub warmup_start: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 6e-5,
            power: 0.9,
            warmup_frac: 0.1,
            warmup_start: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: FusionMode,
    /// Weight of the consistency loss.
    pub beta: f64,
    pub model: ModelSection,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 4,
            mode: FusionMode::Selection,
            beta: 1.0,
            model: ModelSection::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and non-negative, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optim;
        let checks = [
            (o.base_lr >= 0.0 && o.base_lr.is_finite(), "base_lr must be finite and non-negative"),
            (o.power > 0.0 && o.power.is_finite(), "power must be positive"),
            ((0.0..1.0).contains(&o.warmup_frac), "warmup_frac must lie in [0, 1)"),
            ((0.0..=1.0).contains(&o.warmup_start), "warmup_start must lie in [0, 1]"),
            (o.weight_decay >= 0.0 && o.weight_decay.is_finite(), "weight_decay must be non-negative"),
            ((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), "Adam betas must lie in [0, 1)"),
            (o.eps > 0.0, "eps must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        self.model.encoder.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Fills in modalities and classes from the data, rejecting conflicts.
    pub fn resolve_model(&self, data_modalities: &[String], data_classes: usize) -> Result<ModelConfig> {
        let modalities = match &self.model.modalities {
            Some(m) => {
                check_modalities(m, data_modalities)?;
                m.clone()
            }
            None => data_modalities.to_vec(),
        };
        let classes = match self.model.classes {
            Some(k) if k != data_classes => {
                return Err(Error::ConfigMismatch(format!(
                    "config has {k} classes, data has {data_classes}"
                )))
            }
            Some(k) => k,
            None => data_classes,
        };
        let cfg = ModelConfig {
            modalities,
            classes,
            encoder: self.model.encoder.clone(),
            embed_dim: self.model.embed_dim,
            input_norm: self.model.input_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The model and the data must list the same modalities in the same order.
pub fn check_modalities(model: &[String], data: &[String]) -> Result<()> {
    if model.len() != data.len() {
        return Err(Error::ConfigMismatch(format!(
            "model expects {} modalities, data has {}",
            model.len(),
            data.len()
        )));
    }
    if model != data {
        return Err(Error::ModalityMismatch {
            model: model.to_vec(),
            data: data.to_vec(),
        });
    }
    Ok(())
}
