//! Group-relative advantages and the clipped, KL-regularized objective.
//!
//! ```text
//! A_i = (r_i - mean(r)) / std(r)
//! J   = 1/G sum_i mean_t [ min(rho * A_i, clip(rho, 1-eps, 1+eps) * A_i) - gamma * kl ]
//! rho = exp(logp_new - logp_old)
//! kl  = exp(logp_ref - logp_new) - (logp_ref - logp_new) - 1
//! ```
//!
//! Everything here works on plain log-probability arrays so that any policy
//! able to score its own tokens can be optimized with it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::TokenSequence;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("degenerate group: need at least 2 rewards, got {0}")]
    DegenerateGroup(usize),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid grpo config: {0}")]
    InvalidConfig(String),
}

/// How the probability ratio is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    /// One ratio per token; the surrogate is averaged over the sequence.
    #[default]
    PerToken,
    /// One ratio per sequence from the summed log-probabilities.
    Sequence,
}

impl RatioMode {
    fn is_per_token(&self) -> bool {
        *self == RatioMode::PerToken
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub std_floor: f64,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "RatioMode::is_per_token")]
    pub ratio_mode: RatioMode,
}

impl GrpoConfig {
    /// Group size 8, temperature 0.8, KL weight 0.001, clip range 0.2.
    pub const PAPER: GrpoConfig = GrpoConfig {
        group_size: 8,
        clip_epsilon: 0.2,
        kl_coeff: 0.001,
        std_floor: 1e-8,
        temperature: 0.8,
        ratio_mode: RatioMode::PerToken,
    };

    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::InvalidConfig(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!(
                "kl_coeff must be >= 0, got {}",
                self.kl_coeff
            )));
        }
        if !(self.std_floor > 0.0) {
            return Err(GrpoError::InvalidConfig("std_floor must be > 0".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GrpoError::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self::PAPER
    }
}

/// Standardized rewards of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdvantageVector(pub Vec<f64>);

impl std::ops::Deref for AdvantageVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Population-std standardization; a group whose std falls below
/// `std_floor` gets all-zero advantages.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<AdvantageVector, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::DegenerateGroup(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("reward"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(AdvantageVector(vec![0.0; rewards.len()]));
    }
    Ok(AdvantageVector(
        rewards.iter().map(|r| (r - mean) / std).collect(),
    ))
}

/// `exp(ref - new) - (ref - new) - 1`; non-negative and zero iff equal.
pub fn token_kl_estimate(logp_new: f64, logp_ref: f64) -> Result<f64, GrpoError> {
    if !logp_new.is_finite() || !logp_ref.is_finite() {
        return Err(GrpoError::NonFinite("log-probability"));
    }
    Ok(kl_term(logp_new, logp_ref).0)
}

/// Estimator value and its derivative with respect to `logp_new`.
fn kl_term(logp_new: f64, logp_ref: f64) -> (f64, f64) {
    let diff = logp_ref - logp_new;
    let ratio = diff.exp();
    // exp_m1 keeps precision for tiny differences
    ((diff.exp_m1() - diff).max(0.0), 1.0 - ratio)
}

/// `min(rho * A, clip(rho) * A)` and its derivative with respect to `rho`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// One prompt's sampled sequences together with what the objective needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: u64,
    pub sequences: Vec<TokenSequence>,
    pub old_logps: Vec<Vec<f64>>,
    pub ref_logps: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let g = self.sequences.len();
        if self.old_logps.len() != g || self.ref_logps.len() != g || self.rewards.len() != g {
            return Err(GrpoError::ShapeMismatch(format!(
                "group of {g} sequences with {} old, {} ref log-prob lists and {} rewards",
                self.old_logps.len(),
                self.ref_logps.len(),
                self.rewards.len()
            )));
        }
        for (i, seq) in self.sequences.iter().enumerate() {
            if self.old_logps[i].len() != seq.len() || self.ref_logps[i].len() != seq.len() {
                return Err(GrpoError::ShapeMismatch(format!(
                    "sequence {i} has {} tokens but {} old / {} ref log-probs",
                    seq.len(),
                    self.old_logps[i].len(),
                    self.ref_logps[i].len()
                )));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(GrpoError::NonFinite("reward"));
        }
        Ok(())
    }
}

/// Objective value plus `dJ / d logp_new` for every token.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad_logp: Vec<Vec<f64>>,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

pub fn grpo_objective(
    group: &RolloutGroup,
    logp_new: &[Vec<f64>],
    advantages: &AdvantageVector,
    cfg: &GrpoConfig,
) -> Result<f64, GrpoError> {
    Ok(grpo_objective_with_grad(group, logp_new, advantages, cfg)?.value)
}

pub fn grpo_objective_with_grad(
    group: &RolloutGroup,
    logp_new: &[Vec<f64>],
    advantages: &AdvantageVector,
    cfg: &GrpoConfig,
) -> Result<ObjectiveEval, GrpoError> {
    group.validate()?;
    let g = group.len();
    if logp_new.len() != g || advantages.len() != g {
        return Err(GrpoError::ShapeMismatch(format!(
            "group of {g} with {} new log-prob lists and {} advantages",
            logp_new.len(),
            advantages.len()
        )));
    }
    if g == 0 {
        return Err(GrpoError::DegenerateGroup(0));
    }
    let eps = cfg.clip_epsilon;
    let gamma = cfg.kl_coeff;
    let mut total = 0.0;
    let mut kl_total = 0.0;
    let mut kl_count = 0usize;
    let mut clipped = 0usize;
    let mut ratios = 0usize;
    let mut grad_logp = Vec::with_capacity(g);

    for i in 0..g {
        let new = &logp_new[i];
        let old = &group.old_logps[i];
        let reference = &group.ref_logps[i];
        if new.len() != old.len() {
            return Err(GrpoError::ShapeMismatch(format!(
                "sequence {i}: {} new log-probs for {} tokens",
                new.len(),
                old.len()
            )));
        }
        if new.iter().any(|v| !v.is_finite()) {
            return Err(GrpoError::NonFinite("log-probability"));
        }
        let n = new.len();
        let mut grad = vec![0.0; n];
        if n == 0 {
            grad_logp.push(grad);
            continue;
        }
        let inv_n = 1.0 / n as f64;
        let a = advantages[i];
        let mut seq_value = 0.0;

        match cfg.ratio_mode {
            RatioMode::PerToken => {
                for t in 0..n {
                    let ratio = (new[t] - old[t]).exp();
                    let (surrogate, d_ratio) = clipped_surrogate(ratio, a, eps);
                    if d_ratio == 0.0 && a != 0.0 {
                        clipped += 1;
                    }
                    ratios += 1;
                    seq_value += surrogate;
                    grad[t] += d_ratio * ratio * inv_n;
                }
            }
            RatioMode::Sequence => {
                let log_ratio: f64 = new.iter().zip(old).map(|(a, b)| a - b).sum();
                let ratio = log_ratio.exp();
                let (surrogate, d_ratio) = clipped_surrogate(ratio, a, eps);
                if d_ratio == 0.0 && a != 0.0 {
                    clipped += 1;
                }
                ratios += 1;
                // surrogate is counted once per sequence, spread so the token mean below recovers it
                seq_value += surrogate * n as f64;
                for gt in grad.iter_mut() {
                    *gt += d_ratio * ratio;
                }
            }
        }

        for t in 0..n {
            let (kl, d_kl) = kl_term(new[t], reference[t]);
            kl_total += kl;
            kl_count += 1;
            seq_value -= gamma * kl;
            grad[t] -= gamma * d_kl * inv_n;
        }
        total += seq_value * inv_n;
        grad_logp.push(grad);
    }

    let inv_g = 1.0 / g as f64;
    for grad in &mut grad_logp {
        for v in grad.iter_mut() {
            *v *= inv_g;
        }
    }
    Ok(ObjectiveEval {
        value: total * inv_g,
        grad_logp,
        mean_kl: if kl_count > 0 { kl_total / kl_count as f64 } else { 0.0 },
        clip_fraction: if ratios > 0 { clipped as f64 / ratios as f64 } else { 0.0 },
    })
}
