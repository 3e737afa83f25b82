//! Run configuration: one TOML document with model, augmentation and
//! per-stage sections. Every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, CommentSampling, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, DEFAULT_MARGIN};
use crate::zsl::StyleMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub grad_clip: f64,
    pub comment_sampling: CommentSampling,
    /// Write a resumable checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Log held-out losses every this many steps (0 = never).
    pub eval_every: usize,
    /// Checkpoint to start from instead of a fresh init.
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            alpha: 1.0,
            beta: 2.0,
            grad_clip: 1.0,
            comment_sampling: CommentSampling::Random,
            checkpoint_every: 0,
            eval_every: 0,
            init: None,
            out: None,
        }
    }
}

impl PretrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub margin: f64,
    /// `v H + v` rather than `v H`.
    pub residual: bool,
    /// Frozen text anchor rather than a learned one.
    pub text_anchor: bool,
    /// Log training SRCC every this many steps (0 = never).
    pub eval_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            margin: DEFAULT_MARGIN,
            residual: true,
            text_anchor: true,
            eval_every: 0,
            checkpoint: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZslMode {
    Single,
    Ensemble,
}

impl From<ZslMode> for StyleMode {
    fn from(m: ZslMode) -> Self {
        match m {
            ZslMode::Single => StyleMode::Single,
            ZslMode::Ensemble => StyleMode::Ensemble,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub zsl_mode: ZslMode,
    pub caption_max_len: usize,
    /// Alternate prompt bank; the built-in one otherwise.
    pub prompts: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            zsl_mode: ZslMode::Ensemble,
            caption_max_len: 32,
            prompts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub synth: SynthSpec,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if self.augment.crop_size != self.model.image_size {
            return Err(Error::Config(format!(
                "augment.crop_size {} must equal model.image_size {}",
                self.augment.crop_size, self.model.image_size
            )));
        }
        let p = &self.pretrain;
        let a = &self.adapt;
        let checks = [
            (p.steps >= 1, "pretrain.steps must be >= 1"),
            (p.batch_size >= 1, "pretrain.batch_size must be >= 1"),
            (p.learning_rate > 0.0, "pretrain.learning_rate must be > 0"),
            (p.weight_decay >= 0.0, "pretrain.weight_decay must be >= 0"),
            (p.grad_clip > 0.0, "pretrain.grad_clip must be > 0"),
            (a.steps >= 1, "adapt.steps must be >= 1"),
            (a.batch_size >= 2, "adapt.batch_size must be >= 2"),
            (a.learning_rate > 0.0, "adapt.learning_rate must be > 0"),
            (a.weight_decay >= 0.0, "adapt.weight_decay must be >= 0"),
            (a.margin >= 0.0, "adapt.margin must be >= 0"),
            (self.eval.caption_max_len >= 1, "eval.caption_max_len must be >= 1"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config(msg.to_string()));
        }
        self.synth.validate()?;
        p.weights().validate()
    }
}
