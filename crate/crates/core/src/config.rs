//! TOML configuration: sectioned key = value files with named presets for
//! the published SDE operating points.

use crate::score::NetConfig;
use crate::sde::{SdeKind, SdeParams};
use crate::spectral::StftConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config validation error: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeSection {
    /// Named preset; explicit fields below override it.
    pub preset: Option<String>,
    pub kind: Option<SdeKind>,
    pub gamma: Option<f64>,
    pub c: Option<f64>,
    pub k_base: Option<f64>,
    pub t_eps: Option<f64>,
    pub t_rev: Option<f64>,
}

impl Default for SdeSection {
    fn default() -> Self {
        Self {
            preset: Some("ouve-paper".to_string()),
            kind: None,
            gamma: None,
            c: None,
            k_base: None,
            t_eps: None,
            t_rev: None,
        }
    }
}

impl SdeSection {
    pub fn resolve(&self) -> Result<SdeParams, ConfigError> {
        let mut params = match &self.preset {
            Some(name) => SdeParams::preset(name).ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "unknown sde preset `{name}` (available: ouve-paper, bbed-paper)"
                ))
            })?,
            None => SdeParams::ouve_paper(),
        };
        if let Some(kind) = self.kind {
            params = match kind {
                SdeKind::Ouve => SdeParams::ouve_paper(),
                SdeKind::Bbed => SdeParams::bbed_paper(),
            };
        }
        if let Some(v) = self.gamma {
            params.gamma = v;
        }
        if let Some(v) = self.c {
            params.c = v;
        }
        if let Some(v) = self.k_base {
            params.k_base = v;
        }
        if let Some(v) = self.t_eps {
            params.t_eps = v;
        }
        if let Some(v) = self.t_rev {
            params.t_rev = v;
        }
        params.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Buffer length B (number of reverse steps).
    pub buffer: usize,
    /// Explicit ascending diffusion times overriding the linear schedule.
    pub steps: Option<Vec<f64>>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { buffer: 20, steps: None }
    }
}

impl GridSection {
    /// Inference grid: explicit steps when given, otherwise linear from
    /// `t_eps` to `t_rev`.
    pub fn resolve(&self, sde: &crate::sde::SdeParams) -> Result<crate::dbuffer::TimeGrid, ConfigError> {
        let grid = match &self.steps {
            Some(steps) => {
                if steps.len() != self.buffer {
                    return Err(ConfigError::Invalid(format!(
                        "grid.steps has {} entries but grid.buffer = {}",
                        steps.len(),
                        self.buffer
                    )));
                }
                crate::dbuffer::TimeGrid::new(steps.clone())
            }
            None => crate::dbuffer::TimeGrid::linear(self.buffer, sde.t_eps, sde.t_rev),
        }
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if grid.t_last() > sde.t_rev + 1e-12 {
            return Err(ConfigError::Invalid(format!(
                "grid.steps end at {} beyond t_rev = {}",
                grid.t_last(),
                sde.t_rev
            )));
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub k_frames: usize,
    pub grad_clip: Option<f64>,
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    /// Pairs held out from the end of the manifest for evaluation.
    pub holdout: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            ema_decay: 0.999,
            epochs: 250,
            seed: 0,
            k_frames: 128,
            grad_clip: None,
            dataset_dir: PathBuf::from("data/train"),
            checkpoint_dir: PathBuf::from("runs"),
            holdout: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub stft: StftConfig,
    pub sde: SdeSection,
    pub grid: GridSection,
    pub net: NetConfig,
    pub train: TrainSection,
}

impl AppConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.stft.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let sde = self.sde.resolve()?;
        self.grid.resolve(&sde)?;
        self.net.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.grid.buffer == 0 || self.grid.buffer > self.train.k_frames {
            return Err(ConfigError::Invalid(format!(
                "grid.buffer must be in 1..=train.k_frames, got {} (k_frames {})",
                self.grid.buffer, self.train.k_frames
            )));
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            ema_decay: self.train.ema_decay,
            epochs: self.train.epochs,
            seed: self.train.seed,
            k_frames: self.train.k_frames,
            buffer: self.grid.buffer,
            grad_clip: self.train.grad_clip,
        }
    }
}
