//! Multi-dimensional process reward for predicted action tokens.
//!
//! Three signals are scored against a ground-truth token sequence:
//!
//! * `qacr`: position-wise token agreement over the longer of the two lengths,
//! * `ctar`: per-step pose/gripper agreement of the decoded chunks,
//! * `fcr`: 1 if the prediction decodes at all.
//!
//! The composite is `omega * qacr + (1 - omega) * ctar + lambda * fcr`, so a
//! perfect prediction scores `1 + lambda`. Every component is zero for a
//! prediction that fails the format check.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, ActionChunk, CodecSpec, Token};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("ground truth malformed: {0}")]
    GroundTruthMalformed(codec::FormatViolation),
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// Weights of the process reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Decay rate of the pose reward, `exp(-alpha * d_t)`.
    pub alpha: f64,
    /// Pose vs. gripper mix inside CTAR.
    pub beta: f64,
    /// QACR vs. CTAR mix.
    pub omega: f64,
    /// Scale of the format reward.
    pub lambda: f64,
}

impl RewardConfig {
    /// `(alpha, beta, omega, lambda) = (5, 0.8, 0.7, 0.1)`.
    pub const PAPER: RewardConfig = RewardConfig {
        alpha: 5.0,
        beta: 0.8,
        omega: 0.7,
        lambda: 0.1,
    };

    pub fn validate(&self) -> Result<(), RewardError> {
        let ok = self.alpha > 0.0
            && (0.0..=1.0).contains(&self.beta)
            && (0.0..=1.0).contains(&self.omega)
            && self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.alpha.is_finite();
        if ok {
            Ok(())
        } else {
            Err(RewardError::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Largest attainable composite reward.
    pub fn max_mdpr(&self) -> f64 {
        1.0 + self.lambda
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self::PAPER
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub qacr: f64,
    pub ctar: f64,
    pub fcr: f64,
    pub mdpr: f64,
}

impl RewardBreakdown {
    pub fn compose(qacr: f64, ctar: f64, fcr: f64, cfg: &RewardConfig) -> Self {
        Self {
            qacr,
            ctar,
            fcr,
            mdpr: cfg.omega * qacr + (1.0 - cfg.omega) * ctar + cfg.lambda * fcr,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

fn check_gt(gt: &[Token], spec: &CodecSpec) -> Result<(), RewardError> {
    codec::expand(gt, spec)
        .map(|_| ())
        .map_err(RewardError::GroundTruthMalformed)
}

/// Matches at shared positions divided by the longer length; 0 when both
/// sequences are empty.
pub fn token_match_rate(pred: &[Token], gt: &[Token]) -> f64 {
    let longest = pred.len().max(gt.len());
    if longest == 0 {
        return 0.0;
    }
    let matches = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    matches as f64 / longest as f64
}

/// Mean over steps of `beta * exp(-alpha * d_t) + (1 - beta) * [grip match]`
/// where `d_t` is the mean absolute pose error at step `t`.
pub fn trajectory_alignment(pred: &ActionChunk, gt: &ActionChunk, cfg: &RewardConfig) -> f64 {
    debug_assert_eq!((pred.h(), pred.d()), (gt.h(), gt.d()));
    let pose_dims = gt.pose_dims() as f64;
    let total: f64 = (0..gt.h())
        .map(|t| {
            let l1: f64 = pred
                .pose(t)
                .iter()
                .zip(gt.pose(t))
                .map(|(a, b)| (a - b).abs())
                .sum();
            let pose = (-cfg.alpha * l1 / pose_dims).exp();
            let grip = if pred.grip(t) == gt.grip(t) { 1.0 } else { 0.0 };
            cfg.beta * pose + (1.0 - cfg.beta) * grip
        })
        .sum();
    total / gt.h() as f64
}

pub fn qacr(pred: &[Token], gt: &[Token], spec: &CodecSpec) -> Result<f64, RewardError> {
    check_gt(gt, spec)?;
    if !codec::format_check(pred, spec) {
        return Ok(0.0);
    }
    Ok(token_match_rate(pred, gt))
}

pub fn ctar(
    pred: &[Token],
    gt: &[Token],
    spec: &CodecSpec,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    check_gt(gt, spec)?;
    let Ok(pred_chunk) = codec::decode(pred, spec) else {
        return Ok(0.0);
    };
    let gt_chunk = codec::decode(gt, spec).expect("ground truth validated above");
    Ok(trajectory_alignment(&pred_chunk, &gt_chunk, cfg))
}

pub fn fcr(pred: &[Token], spec: &CodecSpec) -> f64 {
    if codec::format_check(pred, spec) {
        1.0
    } else {
        0.0
    }
}

pub fn mdpr(
    pred: &[Token],
    gt: &[Token],
    spec: &CodecSpec,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    Ok(GroundTruth::new(gt.to_vec(), spec)?.score(pred, spec, cfg))
}

/// Composite reward with a pre-decoded ground truth chunk.
pub fn score_against(
    pred: &[Token],
    gt: &[Token],
    gt_chunk: &ActionChunk,
    spec: &CodecSpec,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    match codec::decode(pred, spec) {
        Ok(pred_chunk) => RewardBreakdown::compose(
            token_match_rate(pred, gt),
            trajectory_alignment(&pred_chunk, gt_chunk, cfg),
            1.0,
            cfg,
        ),
        Err(_) => RewardBreakdown::zero(),
    }
}

/// Ground truth decoded once, scored against many predictions.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    tokens: Vec<Token>,
    chunk: ActionChunk,
}

impl GroundTruth {
    pub fn new(tokens: Vec<Token>, spec: &CodecSpec) -> Result<Self, RewardError> {
        check_gt(&tokens, spec)?;
        let chunk = codec::decode(&tokens, spec).expect("ground truth validated above");
        Ok(Self { tokens, chunk })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn chunk(&self) -> &ActionChunk {
        &self.chunk
    }

    pub fn score(&self, pred: &[Token], spec: &CodecSpec, cfg: &RewardConfig) -> RewardBreakdown {
        score_against(pred, &self.tokens, &self.chunk, spec, cfg)
    }
}
