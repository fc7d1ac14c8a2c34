//! Experiment configuration: one JSON document tying together the
//! simulation, model, training, and evaluation sections.
//!
//! Unknown keys are rejected everywhere (a typoed hyperparameter name is an
//! error, not a silent default) and validation failures name the offending
//! field by path, e.g. `train.alpha 1.5 must lie in [0, 1]`. The documented
//! schema lives in `docs/config.md`; the bundled reproduction configs under
//! `configs/` are the canonical examples.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::SimConfig;
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse failed: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// A full experiment: identity, data distribution, model geometry,
/// training recipe, and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Names output files; `[A-Za-z0-9._-]` only.
    pub experiment_id: String,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Default output directory; the CLI's `--out-dir` flag and the
    /// `DEFINED_OUT_DIR` environment variable both override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Structural and cross-section validation; messages carry field paths.
    pub fn validate(&self) -> Result<(), String> {
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'-')
        {
            return Err(format!(
                "experiment_id {:?} must be non-empty and use only [A-Za-z0-9._-]",
                self.experiment_id
            ));
        }
        self.sim.validate().map_err(|m| format!("sim.{m}"))?;
        self.model.validate().map_err(|m| format!("model.{m}"))?;
        self.train
            .validate(&self.sim)
            .map_err(|m| format!("train.{m}"))?;
        self.eval
            .validate(&self.sim)
            .map_err(|m| format!("eval.{m}"))?;

        let classes = self.sim.scheme.class_count();
        if self.model.class_count != classes {
            return Err(format!(
                "model.class_count {} does not match sim.scheme {:?} ({} classes)",
                self.model.class_count, self.sim.scheme, classes
            ));
        }
        if self.model.n_r != self.sim.n_r || self.model.n_t != self.sim.n_t {
            return Err(format!(
                "model.n_r/n_t {}x{} does not match sim {}x{}",
                self.model.n_r, self.model.n_t, self.sim.n_r, self.sim.n_t
            ));
        }
        if self.model.t_max < self.sim.t {
            return Err(format!(
                "model.t_max {} is smaller than sim.T {}",
                self.model.t_max, self.sim.t
            ));
        }
        Ok(())
    }

    /// Shrinks the experiment to the CI-scale smoke profile, keeping the
    /// recipe: batch 32, 2,000 pre-train and 500 fine-tune steps, 100-step
    /// warmup, checkpoints every 500 steps, 2,000 evaluation prompts. The
    /// experiment id gains a `-smoke` suffix so outputs never collide with
    /// the full run's.
    pub fn apply_smoke(&mut self) {
        self.experiment_id.push_str("-smoke");
        self.train.batch = 32;
        self.train.pretrain_steps = 2_000;
        self.train.finetune_steps = 500;
        self.train.lr.warmup_steps = 100;
        self.train.eval_every = 500;
        self.eval.n_prompts = 2_000;
    }
}
