//! Supervised and reinforcement training loops over demonstrations, and
//! greedy-decoding evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, CodecSpec};
use crate::grpo::GrpoConfig;
use crate::policy::{self, AdamW, PolicyError, PolicyParams};
use crate::reward::{GroundTruth, RewardConfig, RewardError};
use crate::tasks::{self, Demonstration, TaskError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("nothing to train on")]
    NoDemonstrations,
    #[error("parameters diverged at step {0}")]
    Diverged(usize),
}

/// Optimizer and batching settings shared by both trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sft_lr: f64,
    pub rft_lr: f64,
    pub weight_decay: f64,
    /// Prompts per optimizer step.
    pub batch_size: usize,
    /// Success tolerance on pose entries.
    pub tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sft_lr: 1e-2,
            rft_lr: 3e-3,
            weight_decay: 0.0,
            batch_size: 8,
            tol: 0.1,
        }
    }
}

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_mdpr: f64,
    pub mean_qacr: f64,
    pub mean_ctar: f64,
    pub mean_fcr: f64,
    /// GRPO objective for RFT steps, negative cross-entropy for SFT steps.
    pub objective: f64,
}

/// splitmix64 over a base seed and a path of labels.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Demonstration with its ground-truth tokens pre-encoded.
#[derive(Debug, Clone)]
pub struct EncodedDemo {
    pub demo: Demonstration,
    pub truth: GroundTruth,
}

pub fn encode_demos(demos: &[Demonstration], spec: &CodecSpec) -> Result<Vec<EncodedDemo>, TrainError> {
    demos
        .iter()
        .map(|d| {
            let tokens = codec::encode(&d.chunk, spec)?;
            Ok(EncodedDemo {
                demo: d.clone(),
                truth: GroundTruth::new(tokens.0, spec)?,
            })
        })
        .collect()
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Default)]
struct Means {
    mdpr: f64,
    qacr: f64,
    ctar: f64,
    fcr: f64,
    n: usize,
}

impl Means {
    fn add(&mut self, b: &crate::reward::RewardBreakdown) {
        self.mdpr += b.mdpr;
        self.qacr += b.qacr;
        self.ctar += b.ctar;
        self.fcr += b.fcr;
        self.n += 1;
    }

    fn point(&self, step: usize, objective: f64) -> CurvePoint {
        let n = self.n.max(1) as f64;
        CurvePoint {
            step,
            mean_mdpr: self.mdpr / n,
            mean_qacr: self.qacr / n,
            mean_ctar: self.ctar / n,
            mean_fcr: self.fcr / n,
            objective,
        }
    }
}

/// Cross-entropy training, `epochs` passes over `demos` reshuffled per epoch.
/// Curve rewards are measured on greedy decodes of each batch.
pub struct SftTrainer<'a> {
    pub spec: &'a CodecSpec,
    pub reward: &'a RewardConfig,
    pub cfg: &'a TrainConfig,
}

impl SftTrainer<'_> {
    pub fn run(
        &self,
        params: &mut PolicyParams,
        demos: &[EncodedDemo],
        epochs: usize,
        seed: u64,
        curve: &mut Vec<CurvePoint>,
    ) -> Result<(), TrainError> {
        if demos.is_empty() {
            return Err(TrainError::NoDemonstrations);
        }
        let targets = demos
            .iter()
            .map(|d| policy::sft_target(params, d.truth.tokens(), self.spec))
            .collect::<Result<Vec<_>, _>>()?;
        let mut opt = AdamW::new(params.len(), self.cfg.sft_lr, self.cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut step = curve.last().map_or(0, |p| p.step + 1);
        for _ in 0..epochs {
            for batch in batches(demos.len(), self.cfg.batch_size, &mut rng) {
                let mut grad = vec![0.0; params.len()];
                let mut loss = 0.0;
                let mut means = Means::default();
                for &i in &batch {
                    let ctx = &demos[i].demo.context;
                    let (l, g) = policy::sft_loss_and_grad(params, ctx, &targets[i])?;
                    loss += l;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                    let pred = policy::greedy(params, ctx)?;
                    means.add(&demos[i].truth.score(&pred, self.spec, self.reward));
                }
                let inv = 1.0 / batch.len() as f64;
                grad.iter_mut().for_each(|g| *g *= inv);
                opt.step(params, &grad);
                if !params.is_finite() {
                    return Err(TrainError::Diverged(step));
                }
                curve.push(means.point(step, -loss * inv));
                step += 1;
            }
        }
        Ok(())
    }
}

/// Group-relative policy optimization on self-sampled chunks scored against
/// the demonstrations. The reference policy is fixed for the whole run.
pub struct RftTrainer<'a> {
    pub spec: &'a CodecSpec,
    pub reward: &'a RewardConfig,
    pub grpo: &'a GrpoConfig,
    pub cfg: &'a TrainConfig,
}

impl RftTrainer<'_> {
    /// Runs `steps` optimizer steps, cycling through shuffled epochs.
    pub fn run_steps(
        &self,
        params: &mut PolicyParams,
        reference: &PolicyParams,
        demos: &[EncodedDemo],
        steps: usize,
        seed: u64,
        curve: &mut Vec<CurvePoint>,
    ) -> Result<(), TrainError> {
        if demos.is_empty() {
            return Err(TrainError::NoDemonstrations);
        }
        let mut opt = AdamW::new(params.len(), self.cfg.rft_lr, self.cfg.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = curve.last().map_or(0, |p| p.step + 1);
        let mut queue: Vec<Vec<usize>> = Vec::new();
        for k in 0..steps {
            if queue.is_empty() {
                queue = batches(demos.len(), self.cfg.batch_size, &mut rng);
                queue.reverse();
            }
            let batch = queue.pop().expect("refilled above");
            let step = first + k;
            curve.push(self.step(params, reference, demos, &batch, &mut opt, derive_seed(seed, &[step as u64]))?);
            if !params.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            curve.last_mut().expect("pushed").step = step;
        }
        Ok(())
    }

    /// Runs `epochs` full passes over `demos`.
    pub fn run_epochs(
        &self,
        params: &mut PolicyParams,
        reference: &PolicyParams,
        demos: &[EncodedDemo],
        epochs: usize,
        seed: u64,
        curve: &mut Vec<CurvePoint>,
    ) -> Result<(), TrainError> {
        let per_epoch = demos.len().div_ceil(self.cfg.batch_size.max(1));
        self.run_steps(params, reference, demos, epochs * per_epoch, seed, curve)
    }

    fn step(
        &self,
        params: &mut PolicyParams,
        reference: &PolicyParams,
        demos: &[EncodedDemo],
        batch: &[usize],
        opt: &mut AdamW,
        seed: u64,
    ) -> Result<CurvePoint, TrainError> {
        let mut grad = vec![0.0; params.len()];
        let mut objective = 0.0;
        let mut means = Means::default();
        for (slot, &i) in batch.iter().enumerate() {
            let demo = &demos[i];
            let sampled = policy::sample_group(params, &demo.demo.context, self.grpo, derive_seed(seed, &[slot as u64]))?;
            let rewards: Vec<f64> = (0..sampled.len())
                .map(|s| {
                    let b = demo.truth.score(sampled.action_tokens(s), self.spec, self.reward);
                    means.add(&b);
                    b.mdpr
                })
                .collect();
            let eval = policy::rft_objective_and_grad(params, &sampled, &rewards, reference, self.grpo)?;
            objective += eval.objective;
            for (a, b) in grad.iter_mut().zip(&eval.grad) {
                *a += b;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        // optimizer descends, objective is maximized
        grad.iter_mut().for_each(|g| *g *= -inv);
        opt.step(params, &grad);
        Ok(means.point(0, objective * inv))
    }
}

/// Fraction of `episodes` whose greedy decode is a success.
pub fn success_rate(
    params: &PolicyParams,
    episodes: &[Demonstration],
    spec: &CodecSpec,
    tol: f64,
) -> Result<f64, TrainError> {
    if episodes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ep in episodes {
        let tokens = policy::greedy(params, &ep.context)?;
        if let Ok(chunk) = codec::decode(&tokens, spec) {
            if tasks::is_success(&chunk, &ep.chunk, tol)? {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / episodes.len() as f64)
}

/// Mean composite reward of `n` samples per demo.
pub fn mean_group_reward(
    params: &PolicyParams,
    demos: &[EncodedDemo],
    spec: &CodecSpec,
    reward: &RewardConfig,
    grpo: &GrpoConfig,
    seed: u64,
) -> Result<CurvePoint, TrainError> {
    let mut means = Means::default();
    for (i, demo) in demos.iter().enumerate() {
        let sampled = policy::sample_group(params, &demo.demo.context, grpo, derive_seed(seed, &[i as u64]))?;
        for s in 0..sampled.len() {
            means.add(&demo.truth.score(sampled.action_tokens(s), spec, reward));
        }
    }
    Ok(means.point(0, 0.0))
}
