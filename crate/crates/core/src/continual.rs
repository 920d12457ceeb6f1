//! Base + lifelong training protocol with experience replay, and the
//! forward-transfer / backward-transfer / area-under-curve metrics.
//!
//! The base stage trains on all base tasks at once and counts as the first
//! learning step; every lifelong task is one further step. Column 0 of the
//! success matrix is the mean success over the base tasks, column `k` the
//! success on the `k`-th lifelong task.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecSpec;
use crate::grpo::GrpoConfig;
use crate::policy::PolicyParams;
use crate::reward::RewardConfig;
use crate::tasks::{Demonstration, TaskError, TaskSpec};
use crate::train::{self, derive_seed, RftTrainer, SftTrainer, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("malformed success matrix: {0}")]
    MalformedMatrix(String),
    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),
    #[error("task {0} was already learned")]
    AlreadyLearned(usize),
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainer {
    Sft,
    Rft,
}

/// How the last learning step enters the backward-transfer average; it has
/// no later steps to compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NbtConvention {
    /// Average over all `K` steps with the last contributing 0.
    #[default]
    IncludeLastAsZero,
    /// Average over the first `K - 1` steps only.
    SkipLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub base_task_ids: Vec<usize>,
    pub lifelong_task_ids: Vec<usize>,
    pub demos_per_base_task: usize,
    pub demos_per_new_task: usize,
    pub replay_per_old_task: usize,
    pub eval_episodes_per_task: usize,
    pub trainer: Trainer,
    /// Supervised epochs of the base stage, run for both trainers.
    pub base_epochs: usize,
    /// Extra RFT epochs of the base stage when `trainer` is `rft`.
    pub base_rft_epochs: usize,
    pub lifelong_epochs: usize,
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.base_task_ids.is_empty() {
            return Err(HarnessError::InvalidPlan("empty base task set".into()));
        }
        if self.lifelong_task_ids.is_empty() {
            return Err(HarnessError::InvalidPlan("empty lifelong task list".into()));
        }
        let mut seen = BTreeSet::new();
        for id in self.base_task_ids.iter().chain(&self.lifelong_task_ids) {
            if !seen.insert(*id) {
                return Err(HarnessError::InvalidPlan(format!("task {id} listed twice")));
            }
        }
        if self.demos_per_base_task == 0 || self.demos_per_new_task == 0 {
            return Err(HarnessError::InvalidPlan("demonstration budgets must be positive".into()));
        }
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        self.base_task_ids.len() + self.lifelong_task_ids.len()
    }

    /// Learning steps: the base stage plus one per lifelong task.
    pub fn steps(&self) -> usize {
        1 + self.lifelong_task_ids.len()
    }
}

/// `rows[k][j]`: success on step `j` after learning step `k`, `j <= k`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SuccessMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl SuccessMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, HarnessError> {
        let m = Self { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.rows[k][j]
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.rows.is_empty() {
            return Err(HarnessError::MalformedMatrix("no rows".into()));
        }
        for (k, row) in self.rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(HarnessError::MalformedMatrix(format!(
                    "row {k} has {} entries, expected {}",
                    row.len(),
                    k + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(HarnessError::MalformedMatrix(format!("entry {v} in row {k} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fwt: f64,
    pub nbt: f64,
    pub auc: f64,
    pub nbt_k: Vec<f64>,
    pub auc_k: Vec<f64>,
}

pub fn compute_metrics(s: &SuccessMatrix, convention: NbtConvention) -> Result<MetricsReport, HarnessError> {
    s.validate()?;
    let k_total = s.k();
    let kf = k_total as f64;
    let fwt = (0..k_total).map(|k| s.get(k, k)).sum::<f64>() / kf;
    let mut nbt_k = Vec::with_capacity(k_total);
    let mut auc_k = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let later = k + 1..k_total;
        let n_later = later.len();
        let drop: f64 = later.clone().map(|q| s.get(k, k) - s.get(q, k)).sum();
        nbt_k.push(if n_later == 0 { 0.0 } else { drop / n_later as f64 });
        let kept: f64 = later.map(|q| s.get(q, k)).sum();
        auc_k.push((s.get(k, k) + kept) / (n_later + 1) as f64);
    }
    let nbt = match convention {
        NbtConvention::IncludeLastAsZero => nbt_k.iter().sum::<f64>() / kf,
        NbtConvention::SkipLast if k_total > 1 => nbt_k[..k_total - 1].iter().sum::<f64>() / (kf - 1.0),
        NbtConvention::SkipLast => 0.0,
    };
    let auc = auc_k.iter().sum::<f64>() / kf;
    Ok(MetricsReport {
        fwt,
        nbt,
        auc,
        nbt_k,
        auc_k,
    })
}

/// Demonstrations of one learned task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDemos {
    pub task_id: usize,
    pub demos: Vec<Demonstration>,
}

/// The first `replay_per_old_task` demos (by index) of every learned task,
/// in learning order.
pub fn build_replay_set(history: &[TaskDemos], replay_per_old_task: usize) -> Vec<Demonstration> {
    let mut out = Vec::new();
    for task in history {
        let mut demos: Vec<&Demonstration> = task.demos.iter().collect();
        demos.sort_by_key(|d| d.demo_index);
        out.extend(demos.into_iter().take(replay_per_old_task).cloned());
    }
    out
}

/// Everything the protocol needs besides the plan.
#[derive(Debug, Clone)]
pub struct Setup<'a> {
    pub spec: &'a CodecSpec,
    pub reward: &'a RewardConfig,
    pub grpo: &'a GrpoConfig,
    pub train: &'a TrainConfig,
    pub suite: &'a [TaskSpec],
    /// Training pool per task id, at least as long as the larger budget.
    pub pool: &'a [Vec<Demonstration>],
    /// Held-out evaluation episodes per task id.
    pub eval: &'a [Vec<Demonstration>],
}

impl Setup<'_> {
    fn task(&self, id: usize) -> Result<&TaskSpec, HarnessError> {
        self.suite.iter().find(|t| t.task_id == id).ok_or(HarnessError::UnknownTask(id))
    }

    fn pool(&self, id: usize, n: usize) -> Result<Vec<Demonstration>, HarnessError> {
        self.task(id)?;
        let pool = self.pool.get(id).ok_or(HarnessError::UnknownTask(id))?;
        Ok(pool.iter().take(n).cloned().collect())
    }

    fn success(&self, params: &PolicyParams, id: usize) -> Result<f64, HarnessError> {
        let episodes = self.eval.get(id).ok_or(HarnessError::UnknownTask(id))?;
        Ok(train::success_rate(params, episodes, self.spec, self.train.tol)?)
    }

    fn sft(&self) -> SftTrainer<'_> {
        SftTrainer {
            spec: self.spec,
            reward: self.reward,
            cfg: self.train,
        }
    }

    fn rft(&self) -> RftTrainer<'_> {
        RftTrainer {
            spec: self.spec,
            reward: self.reward,
            grpo: self.grpo,
            cfg: self.train,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseOutcome {
    pub params: PolicyParams,
    /// `(task_id, success)` per base task.
    pub success: Vec<(usize, f64)>,
    pub history: Vec<TaskDemos>,
}

pub fn run_base_stage(
    setup: &Setup<'_>,
    plan: &StagePlan,
    mut params: PolicyParams,
    seed: u64,
) -> Result<BaseOutcome, HarnessError> {
    if plan.base_task_ids.is_empty() {
        return Err(HarnessError::InvalidPlan("empty base task set".into()));
    }
    let mut history = Vec::new();
    let mut demos = Vec::new();
    for &id in &plan.base_task_ids {
        let task_demos = setup.pool(id, plan.demos_per_base_task)?;
        demos.extend(task_demos.iter().cloned());
        history.push(TaskDemos {
            task_id: id,
            demos: task_demos,
        });
    }
    let encoded = train::encode_demos(&demos, setup.spec)?;
    let mut curve = Vec::new();
    setup.sft().run(&mut params, &encoded, plan.base_epochs, derive_seed(seed, &[1]), &mut curve)?;
    if plan.trainer == Trainer::Rft && plan.base_rft_epochs > 0 {
        let reference = params.clone();
        setup.rft().run_epochs(&mut params, &reference, &encoded, plan.base_rft_epochs, derive_seed(seed, &[2]), &mut curve)?;
    }
    let success = plan
        .base_task_ids
        .iter()
        .map(|&id| Ok((id, setup.success(&params, id)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(BaseOutcome {
        params,
        success,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub params: PolicyParams,
    /// Success per learned task, in learning order, the new task last.
    pub task_success: Vec<(usize, f64)>,
    pub demos_used: usize,
}

/// Trains on the new task's demos plus replay, then evaluates every task
/// learned so far. `history` gains the new task.
pub fn run_lifelong_step(
    setup: &Setup<'_>,
    plan: &StagePlan,
    mut params: PolicyParams,
    new_task: usize,
    history: &mut Vec<TaskDemos>,
    seed: u64,
) -> Result<StepOutcome, HarnessError> {
    if history.iter().any(|t| t.task_id == new_task) {
        return Err(HarnessError::AlreadyLearned(new_task));
    }
    let new_demos = setup.pool(new_task, plan.demos_per_new_task)?;
    let mut demos = new_demos.clone();
    demos.extend(build_replay_set(history, plan.replay_per_old_task));
    let encoded = train::encode_demos(&demos, setup.spec)?;
    let mut curve = Vec::new();
    match plan.trainer {
        Trainer::Sft => setup.sft().run(&mut params, &encoded, plan.lifelong_epochs, seed, &mut curve)?,
        Trainer::Rft => {
            let reference = params.clone();
            setup.rft().run_epochs(&mut params, &reference, &encoded, plan.lifelong_epochs, seed, &mut curve)?
        }
    }
    history.push(TaskDemos {
        task_id: new_task,
        demos: new_demos,
    });
    let task_success = history
        .iter()
        .map(|t| Ok((t.task_id, setup.success(&params, t.task_id)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(StepOutcome {
        params,
        task_success,
        demos_used: demos.len(),
    })
}

/// Full protocol outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinualOutcome {
    pub matrix: SuccessMatrix,
    pub metrics: MetricsReport,
    /// Per-task success after every step, `(task_id, success)`.
    pub per_task: Vec<Vec<(usize, f64)>>,
    pub params: PolicyParams,
}

fn matrix_row(base_ids: &[usize], per_task: &[(usize, f64)]) -> Vec<f64> {
    let base: Vec<f64> = per_task.iter().filter(|(id, _)| base_ids.contains(id)).map(|(_, s)| *s).collect();
    let mut row = vec![base.iter().sum::<f64>() / base.len() as f64];
    row.extend(per_task.iter().filter(|(id, _)| !base_ids.contains(id)).map(|(_, s)| *s));
    row
}

pub fn run_protocol(
    setup: &Setup<'_>,
    plan: &StagePlan,
    params: PolicyParams,
    convention: NbtConvention,
    seed: u64,
) -> Result<ContinualOutcome, HarnessError> {
    plan.validate()?;
    let base = run_base_stage(setup, plan, params, derive_seed(seed, &[0]))?;
    let mut rows = vec![matrix_row(&plan.base_task_ids, &base.success)];
    let mut per_task = vec![base.success];
    let mut history = base.history;
    let mut params = base.params;
    for (k, &task) in plan.lifelong_task_ids.iter().enumerate() {
        let step = run_lifelong_step(setup, plan, params, task, &mut history, derive_seed(seed, &[1, k as u64]))?;
        rows.push(matrix_row(&plan.base_task_ids, &step.task_success));
        per_task.push(step.task_success);
        params = step.params;
    }
    let matrix = SuccessMatrix::new(rows)?;
    let metrics = compute_metrics(&matrix, convention)?;
    Ok(ContinualOutcome {
        matrix,
        metrics,
        per_task,
        params,
    })
}
