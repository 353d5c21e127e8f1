use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tasks::TaskConfig;
use crate::compensator::CompensatorConfig;
use crate::error::{RcuError, Result};
use crate::ood::DetectorConfig;
use crate::toymodel::{Composition, PretrainConfig, ToyModelShape, TrainConfig, UpdateKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_labels: usize,
    pub pretrain: PretrainConfig,
}

impl ModelSection {
    pub fn shape(&self) -> ToyModelShape {
        ToyModelShape {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            num_labels: self.num_labels,
        }
    }
}

/// Either a named preset or `preset = "custom"` with a `custom` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensatorSection {
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CompensatorConfig>,
}

impl CompensatorSection {
    pub fn resolve(&self) -> Result<CompensatorConfig> {
        let cfg = match (self.preset.as_str(), self.custom) {
            ("custom", Some(c)) => c,
            ("custom", None) => return Err(RcuError::Config("compensator.preset = \"custom\" needs a [compensator.custom] table".into())),
            (name, None) => CompensatorConfig::from_str(name)?,
            (name, Some(_)) => return Err(RcuError::Config(format!("compensator.custom given with preset {name:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// How evaluation inputs obtain their salience weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaMode {
    /// Every input is scored by every request's detector.
    #[default]
    PerInput,
    /// One weight per request and dataset, mapped from the dataset's mean score.
    DatasetMean,
}

impl FromStr for BetaMode {
    type Err = RcuError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-input" => Ok(BetaMode::PerInput),
            "dataset-mean" => Ok(BetaMode::DatasetMean),
            _ => Err(RcuError::Config(format!("unknown beta mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    /// Drop the orthogonal-axes loss.
    pub no_lo: bool,
    /// Drop the skew loss.
    pub no_lsk: bool,
    /// Replace rotation adapters by the additive update `W + beta BA`
    /// without the rotation losses.
    pub no_rc_lora: bool,
    /// Drop the alignment loss from detector training.
    pub no_lua: bool,
}

pub const ABLATION_NAMES: [&str; 5] = ["none", "no_Lo", "no_LSk", "no_RC_LoRA", "no_LUa"];

impl Ablations {
    pub fn from_name(name: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for part in name.split(',').map(str::trim) {
            match part {
                "none" | "full" => {}
                "no_Lo" => a.no_lo = true,
                "no_LSk" => a.no_lsk = true,
                "no_RC_LoRA" => a.no_rc_lora = true,
                "no_LUa" => a.no_lua = true,
                _ => return Err(RcuError::Config(format!("unknown ablation {part:?}; expected one of {ABLATION_NAMES:?}"))),
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_lo {
            parts.push("no_Lo");
        }
        if self.no_lsk {
            parts.push("no_LSk");
        }
        if self.no_rc_lora {
            parts.push("no_RC_LoRA");
        }
        if self.no_lua {
            parts.push("no_LUa");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid_step: f64,
    pub grid_max: f64,
}

impl SweepSection {
    pub fn grid(&self) -> Result<Vec<f64>> {
        if !(self.grid_step > 0.0 && self.grid_max > 0.0) {
            return Err(RcuError::Config("sweep grid_step and grid_max must be positive".into()));
        }
        let n = (self.grid_max / self.grid_step).round() as usize;
        Ok((0..=n).map(|i| i as f64 * self.grid_step).collect())
    }
}

/// Full experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub composition: Composition,
    pub beta_mode: BetaMode,
    pub ablations: Ablations,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub detector: DetectorConfig,
    pub compensator: CompensatorSection,
    pub tasks: TaskConfig,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RcuError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.shape().validate()?;
        self.training.validate()?;
        self.detector.validate()?;
        self.compensator.resolve()?;
        self.tasks.validate(self.model.vocab_size, self.model.num_labels)?;
        self.sweep.grid()?;
        let p = &self.model.pretrain;
        if p.epochs == 0 || p.batch_size == 0 || !(p.lr > 0.0) {
            return Err(RcuError::Config("model.pretrain needs positive lr, epochs and batch_size".into()));
        }
        p.optimizer.validate()
    }

    /// Training settings after applying the ablation switches.
    pub fn effective_training(&self) -> TrainConfig {
        let mut t = self.training;
        if self.ablations.no_lo || self.ablations.no_rc_lora {
            t.lambdas.ortho = 0.0;
        }
        if self.ablations.no_lsk || self.ablations.no_rc_lora {
            t.lambdas.skew = 0.0;
        }
        t
    }

    pub fn effective_detector(&self) -> DetectorConfig {
        let mut d = self.detector;
        if self.ablations.no_lua {
            d.use_ua = false;
        }
        d
    }

    pub fn update_kind(&self) -> UpdateKind {
        if self.ablations.no_rc_lora {
            UpdateKind::Additive
        } else {
            UpdateKind::Multiplicative
        }
    }
}

/// Desk-scale experiment: three requests, 32-dimensional two-block model, rank 8.
pub const DESK_CONFIG: &str = include_str!("../../configs/desk.toml");
