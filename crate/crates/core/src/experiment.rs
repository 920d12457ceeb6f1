//! End-to-end runs built from an [`ExperimentConfig`]: dataset generation,
//! the single-task warm start + RFT run, reward ablations and the continual
//! protocol report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::continual::{self, HarnessError, MetricsReport, Setup, SuccessMatrix, Trainer};
use crate::policy::PolicyParams;
use crate::reward::RewardConfig;
use crate::tasks::{self, Demonstration, TaskError, TaskSpec};
use crate::train::{self, derive_seed, CurvePoint, RftTrainer, SftTrainer, TrainError};

// labels for derive_seed
const SUITE: u64 = 1;
const POOL: u64 = 2;
const EVAL: u64 = 3;
const INIT: u64 = 4;
const RUN: u64 = 5;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// Tasks, training pools and held-out evaluation episodes, all indexed by
/// task id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub suite: Vec<TaskSpec>,
    pub pool: Vec<Vec<Demonstration>>,
    pub eval: Vec<Vec<Demonstration>>,
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    cfg.validate()?;
    let spec = &cfg.codec;
    let suite = tasks::make_task_suite(cfg.tasks.n_tasks, derive_seed(cfg.seed, &[SUITE]), spec)?;
    let n_eval = cfg.plan.eval_episodes_per_task.max(cfg.single.eval_episodes).max(1);
    let mut pool = Vec::with_capacity(suite.len());
    let mut eval = Vec::with_capacity(suite.len());
    for task in &suite {
        let id = task.task_id as u64;
        pool.push(tasks::generate_demos(task, cfg.tasks.pool_size, cfg.tasks.noise_scale, derive_seed(cfg.seed, &[POOL, id]), spec)?);
        eval.push(tasks::generate_demos(task, n_eval, cfg.tasks.noise_scale, derive_seed(cfg.seed, &[EVAL, id]), spec)?);
    }
    Ok(Dataset { suite, pool, eval })
}

pub fn initial_params(cfg: &ExperimentConfig) -> Result<PolicyParams, ExperimentError> {
    Ok(PolicyParams::init(cfg.policy_dims(), cfg.policy.init, derive_seed(cfg.seed, &[INIT])).map_err(TrainError::from)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTaskReport {
    pub task_id: usize,
    pub reward: RewardConfig,
    /// Mean group reward right after the warm start.
    pub initial: CurvePoint,
    pub final_point: CurvePoint,
    pub success_before: f64,
    pub success_after: f64,
    pub curve: Vec<CurvePoint>,
    pub config_hash: String,
}

impl SingleTaskReport {
    pub fn mdpr_gain(&self) -> f64 {
        self.final_point.mean_mdpr - self.initial.mean_mdpr
    }
}

/// Warm start by SFT on the first `warm_demos` demos of the task, then
/// `rft_steps` RFT steps on `train_demos` demos scored with `reward`.
/// Success is measured with the configured tolerance on held-out episodes.
pub fn run_single_task(
    cfg: &ExperimentConfig,
    data: &Dataset,
    reward: &RewardConfig,
) -> Result<(SingleTaskReport, PolicyParams), ExperimentError> {
    let s = &cfg.single;
    let spec = &cfg.codec;
    let demos = train::encode_demos(&data.pool[s.task_id][..s.train_demos], spec)?;
    let held = &data.eval[s.task_id][..s.eval_episodes];
    let mut params = initial_params(cfg)?;
    let mut warm_curve = Vec::new();
    if s.warm_demos > 0 && s.warm_epochs > 0 {
        SftTrainer {
            spec,
            reward,
            cfg: &cfg.train,
        }
        .run(&mut params, &demos[..s.warm_demos], s.warm_epochs, derive_seed(cfg.seed, &[RUN, 0]), &mut warm_curve)?;
    }
    let probe = &demos[..s.probe_demos.clamp(1, demos.len())];
    let probe_seed = derive_seed(cfg.seed, &[RUN, 2]);
    let initial = train::mean_group_reward(&params, probe, spec, reward, &cfg.grpo, probe_seed)?;
    let success_before = train::success_rate(&params, held, spec, cfg.train.tol)?;
    let reference = params.clone();
    let mut curve = Vec::with_capacity(s.rft_steps);
    RftTrainer {
        spec,
        reward,
        grpo: &cfg.grpo,
        cfg: &cfg.train,
    }
    .run_steps(&mut params, &reference, &demos, s.rft_steps, derive_seed(cfg.seed, &[RUN, 1]), &mut curve)?;
    let mut final_point = train::mean_group_reward(&params, probe, spec, reward, &cfg.grpo, probe_seed)?;
    final_point.step = s.rft_steps;
    let success_after = train::success_rate(&params, held, spec, cfg.train.tol)?;
    let report = SingleTaskReport {
        task_id: s.task_id,
        reward: *reward,
        initial,
        final_point,
        success_before,
        success_after,
        curve,
        config_hash: cfg.hash(),
    };
    Ok((report, params))
}

/// Reward-weight rows of the ablation: full composite, then each term
/// switched off.
pub fn ablation_variants(full: &RewardConfig) -> [(&'static str, RewardConfig); 4] {
    [
        ("full", *full),
        ("without-qacr", RewardConfig { omega: 0.0, ..*full }),
        ("without-ctar", RewardConfig { omega: 1.0, ..*full }),
        ("without-fcr", RewardConfig { lambda: 0.0, ..*full }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub variant: String,
    pub report: SingleTaskReport,
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationEntry>, ExperimentError> {
    let data = build_dataset(cfg)?;
    ablation_variants(&cfg.reward)
        .into_iter()
        .map(|(name, reward)| {
            let (report, _) = run_single_task(cfg, &data, &reward)?;
            Ok(AblationEntry {
                variant: name.to_string(),
                report,
            })
        })
        .collect()
}

/// JSON report of one continual run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    pub k: usize,
    pub s: SuccessMatrix,
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
    pub nbt_k: Vec<f64>,
    pub auc_k: Vec<f64>,
    pub config_hash: String,
}

impl ContinualReport {
    pub fn new(matrix: SuccessMatrix, metrics: MetricsReport, config_hash: String) -> Self {
        Self {
            k: matrix.k(),
            s: matrix,
            fwt: metrics.fwt,
            nbt: metrics.nbt,
            auc: metrics.auc,
            nbt_k: metrics.nbt_k,
            auc_k: metrics.auc_k,
            config_hash,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs the base + lifelong protocol with the config's trainer.
pub fn run_continual(cfg: &ExperimentConfig) -> Result<(ContinualReport, PolicyParams), ExperimentError> {
    let data = build_dataset(cfg)?;
    let eval: Vec<Vec<Demonstration>> = data
        .eval
        .iter()
        .map(|e| e[..cfg.plan.eval_episodes_per_task.min(e.len())].to_vec())
        .collect();
    let setup = Setup {
        spec: &cfg.codec,
        reward: &cfg.reward,
        grpo: &cfg.grpo,
        train: &cfg.train,
        suite: &data.suite,
        pool: &data.pool,
        eval: &eval,
    };
    let outcome = continual::run_protocol(&setup, &cfg.plan, initial_params(cfg)?, cfg.nbt_convention, derive_seed(cfg.seed, &[RUN, 3]))?;
    Ok((ContinualReport::new(outcome.matrix, outcome.metrics, cfg.hash()), outcome.params))
}

/// Same config with the trainer replaced.
pub fn with_trainer(cfg: &ExperimentConfig, trainer: Trainer) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.plan.trainer = trainer;
    c
}
