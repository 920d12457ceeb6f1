//! Experiment configuration and named presets.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, CodecSpec, Compression, NormalizationStats};
use crate::continual::{NbtConvention, StagePlan, Trainer};
use crate::grpo::GrpoConfig;
use crate::policy::{InitConfig, PolicyDims};
use crate::reward::RewardConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?} (known: {1})")]
    UnknownPreset(String, String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Network width; vocabulary and sequence length follow from the codec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub embed: usize,
    pub hidden: usize,
    /// Extra positions beyond the longest valid stream plus end token.
    pub slack: usize,
    pub init: InitConfig,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            embed: 16,
            hidden: 64,
            slack: 4,
            init: InitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSettings {
    pub n_tasks: usize,
    pub noise_scale: f64,
    /// Training demonstrations generated per task.
    pub pool_size: usize,
}

/// Single-task run used by `train-rft`, `ablate` and the efficacy check:
/// a short supervised warm start on a handful of demos, then RFT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleTaskSettings {
    pub task_id: usize,
    pub warm_demos: usize,
    pub warm_epochs: usize,
    pub train_demos: usize,
    pub rft_steps: usize,
    pub eval_episodes: usize,
    /// Demos used to measure mean group reward before and after.
    pub probe_demos: usize,
}

impl Default for SingleTaskSettings {
    fn default() -> Self {
        Self {
            task_id: 0,
            warm_demos: 4,
            warm_epochs: 20,
            train_demos: 50,
            rft_steps: 500,
            eval_episodes: 100,
            probe_demos: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub codec: CodecSpec,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub policy: PolicyShape,
    pub train: TrainConfig,
    pub tasks: TaskSettings,
    pub plan: StagePlan,
    pub single: SingleTaskSettings,
    #[serde(default)]
    pub nbt_convention: NbtConvention,
    pub seed: u64,
    pub output_dir: PathBuf,
}

pub const PRESETS: [&str; 7] = [
    "desk",
    "simpler-widowx",
    "simpler-google-robot",
    "libero",
    "libero-long",
    "real-world",
    "lifelong",
];

impl ExperimentConfig {
    /// Minute-scale defaults: 6 tasks, 2 base + 4 lifelong.
    pub fn desk() -> Self {
        let codec = CodecSpec::new(
            8,
            4,
            32,
            Compression::None,
            NormalizationStats::uniform(4, -1.0, 1.0).expect("valid bounds"),
        )
        .expect("valid codec");
        Self {
            codec,
            reward: RewardConfig::PAPER,
            grpo: GrpoConfig::PAPER,
            policy: PolicyShape::default(),
            train: TrainConfig::default(),
            tasks: TaskSettings {
                n_tasks: 6,
                noise_scale: 0.05,
                pool_size: 50,
            },
            plan: StagePlan {
                base_task_ids: vec![0, 1],
                lifelong_task_ids: vec![2, 3, 4, 5],
                demos_per_base_task: 50,
                demos_per_new_task: 10,
                replay_per_old_task: 5,
                eval_episodes_per_task: 20,
                trainer: Trainer::Rft,
                base_epochs: 40,
                base_rft_epochs: 0,
                lifelong_epochs: 30,
            },
            single: SingleTaskSettings::default(),
            nbt_convention: NbtConvention::default(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Desk config with the optimizer schedule of a published setting:
    /// learning rate 1e-6, the listed global batch size and epochs.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::desk();
        let (batch, epochs) = match name {
            "desk" => return Ok(cfg),
            "simpler-widowx" => (512, 30),
            "simpler-google-robot" => (1024, 40),
            "libero" => (128, 15),
            "libero-long" => (256, 35),
            "real-world" => (128, 20),
            "lifelong" => (32, 10),
            other => return Err(ConfigError::UnknownPreset(other.into(), PRESETS.join(", "))),
        };
        cfg.train.sft_lr = 1e-6;
        cfg.train.rft_lr = 1e-6;
        cfg.train.batch_size = batch;
        cfg.plan.base_epochs = epochs;
        cfg.plan.lifelong_epochs = epochs;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.codec.stats.validate()?;
        self.reward.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.grpo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.plan.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy_dims().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.codec.h < 2 {
            return bad(format!("horizon {} too short for trajectories", self.codec.h));
        }
        if self.tasks.n_tasks == 0 || self.tasks.pool_size == 0 {
            return bad("task count and pool size must be positive".into());
        }
        if !(self.tasks.noise_scale >= 0.0 && self.tasks.noise_scale.is_finite()) {
            return bad(format!("noise scale {}", self.tasks.noise_scale));
        }
        let need = self.plan.demos_per_base_task.max(self.plan.demos_per_new_task);
        if self.tasks.pool_size < need {
            return bad(format!("pool size {} below demo budget {need}", self.tasks.pool_size));
        }
        if let Some(id) = self
            .plan
            .base_task_ids
            .iter()
            .chain(&self.plan.lifelong_task_ids)
            .find(|&&id| id >= self.tasks.n_tasks)
        {
            return bad(format!("plan names task {id} but only {} exist", self.tasks.n_tasks));
        }
        let s = &self.single;
        if s.task_id >= self.tasks.n_tasks {
            return bad(format!("single-task id {} out of range", s.task_id));
        }
        if s.warm_demos > s.train_demos || s.train_demos > self.tasks.pool_size || s.train_demos == 0 {
            return bad("single-task demo counts must satisfy warm <= train <= pool".into());
        }
        for (name, lr) in [("sft_lr", self.train.sft_lr), ("rft_lr", self.train.rft_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.train.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }

    pub fn policy_dims(&self) -> PolicyDims {
        PolicyDims::for_codec(
            &self.codec,
            self.policy.embed,
            self.policy.hidden,
            self.tasks.n_tasks,
            self.policy.slack,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn published_schedules() {
        let c = ExperimentConfig::preset("libero-long").unwrap();
        assert_eq!((c.train.batch_size, c.plan.base_epochs), (256, 35));
        assert_eq!(c.train.rft_lr, 1e-6);
        let c = ExperimentConfig::preset("lifelong").unwrap();
        assert_eq!((c.train.batch_size, c.plan.lifelong_epochs), (32, 10));
        assert_eq!(c.grpo.group_size, 8);
        assert_eq!(c.grpo.temperature, 0.8);
        assert_eq!(
            (c.reward.alpha, c.reward.beta, c.reward.omega, c.reward.lambda, c.grpo.kl_coeff),
            (5.0, 0.8, 0.7, 0.1, 0.001)
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn rejects_inconsistent_plans() {
        let mut c = ExperimentConfig::desk();
        c.plan.lifelong_task_ids.push(9);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.tasks.pool_size = 5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.train.rft_lr = 0.0;
        assert!(c.validate().is_err());
    }
}
