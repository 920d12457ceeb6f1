//! A small autoregressive categorical policy over action tokens.
//!
//! At position `t` the network sees the state
//!
//! ```text
//! [ instr_emb[task] | tok_emb[prev] + pos_emb[t] | obs . obs_proj ]   (3E)
//! ```
//!
//! where `prev` is the previously emitted id (the end-of-chunk id at
//! `t = 0`), followed by `tanh(state . w1 + b1) . w2 + b2` as logits over
//! the vocabulary. The last vocabulary id is the end-of-chunk token.
//!
//! Gradients are backpropagated by hand. Every parameter lives in one flat
//! buffer so optimizers, checkpoints and finite-difference checks can treat
//! the model as a single vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecSpec, Token, TokenSequence};
use crate::grpo::{self, GrpoConfig, GrpoError, RolloutGroup};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("token {token} at position {position} is outside the policy vocabulary of {vocab}")]
    OutOfVocabulary {
        position: usize,
        token: Token,
        vocab: usize,
    },
    #[error("sequence of {len} tokens exceeds the maximum length {max}")]
    TooLong { len: usize, max: usize },
    #[error("instruction id {id} outside the table of {max}")]
    UnknownInstruction { id: usize, max: usize },
    #[error("observation has {found} features, expected {expected}")]
    ObservationShape { expected: usize, found: usize },
    #[error("ground truth is not a valid action token sequence: {0}")]
    InvalidTarget(codec::FormatViolation),
    #[error("invalid policy dimensions: {0}")]
    InvalidDims(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyDims {
    /// Observation features `F`.
    pub features: usize,
    /// Embedding width `E`.
    pub embed: usize,
    /// Hidden width `Hd`.
    pub hidden: usize,
    /// Vocabulary `V_tok`, end-of-chunk token included.
    pub vocab: usize,
    /// Longest sequence the policy emits, end-of-chunk token included.
    pub max_len: usize,
    /// Rows of the instruction table.
    pub instructions: usize,
}

impl PolicyDims {
    /// Vocabulary sized for `spec` plus an end-of-chunk token, room for a
    /// full-length chunk plus `slack` extra tokens.
    pub fn for_codec(spec: &CodecSpec, embed: usize, hidden: usize, instructions: usize, slack: usize) -> Self {
        let max_len = match spec.compression {
            codec::Compression::None => spec.values_per_chunk(),
            codec::Compression::RunLength => 2 * spec.values_per_chunk(),
        } + 1
            + slack;
        Self {
            features: spec.d - 1,
            embed,
            hidden,
            vocab: spec.vocab_size() + 1,
            max_len,
            instructions,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = [
            ("features", self.features),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("max_len", self.max_len),
            ("instructions", self.instructions),
        ]
        .into_iter()
        .find(|(_, v)| *v == 0);
        if let Some((name, _)) = bad {
            return Err(PolicyError::InvalidDims(format!("{name} must be positive")));
        }
        if self.vocab < 2 {
            return Err(PolicyError::InvalidDims("vocab must be >= 2".into()));
        }
        Ok(())
    }

    pub fn eos(&self) -> Token {
        (self.vocab - 1) as Token
    }

    fn state(&self) -> usize {
        3 * self.embed
    }
}

/// Named parameter tensors, in storage and checkpoint order.
pub const TENSOR_NAMES: [&str; 8] = [
    "instr_emb", "tok_emb", "pos_emb", "obs_proj", "w1", "b1", "w2", "b2",
];

#[derive(Debug, Clone, Copy)]
struct Layout {
    instr: usize,
    tok: usize,
    pos: usize,
    obs: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    end: usize,
}

impl Layout {
    fn new(d: &PolicyDims) -> Self {
        let e = d.embed;
        let instr = 0;
        let tok = instr + d.instructions * e;
        let pos = tok + d.vocab * e;
        let obs = pos + d.max_len * e;
        let w1 = obs + d.features * e;
        let b1 = w1 + d.state() * d.hidden;
        let w2 = b1 + d.hidden;
        let b2 = w2 + d.hidden * d.vocab;
        let end = b2 + d.vocab;
        Self {
            instr,
            tok,
            pos,
            obs,
            w1,
            b1,
            w2,
            b2,
            end,
        }
    }

    fn ranges(&self) -> [std::ops::Range<usize>; 8] {
        [
            self.instr..self.tok,
            self.tok..self.pos,
            self.pos..self.obs,
            self.obs..self.w1,
            self.w1..self.b1,
            self.b1..self.w2,
            self.w2..self.b2,
            self.b2..self.end,
        ]
    }
}

/// Initialization scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub embed_std: f64,
    /// Std of the output layer; 0 gives a uniform initial policy.
    pub output_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            embed_std: 0.5,
            output_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dims: PolicyDims,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Result<Self, PolicyError> {
        dims.validate()?;
        Ok(Self {
            dims,
            data: vec![0.0; Layout::new(&dims).end],
        })
    }

    pub fn init(dims: PolicyDims, init: InitConfig, seed: u64) -> Result<Self, PolicyError> {
        let mut params = Self::zeros(dims)?;
        let layout = Layout::new(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |data: &mut [f64], std: f64| {
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("positive std");
                for v in data {
                    *v = normal.sample(&mut rng);
                }
            }
        };
        let d = &mut params.data;
        fill(&mut d[layout.instr..layout.obs], init.embed_std);
        fill(&mut d[layout.obs..layout.w1], 1.0 / (dims.features as f64).sqrt());
        fill(&mut d[layout.w1..layout.b1], 1.0 / (dims.state() as f64).sqrt());
        fill(&mut d[layout.w2..layout.b2], init.output_std);
        Ok(params)
    }

    pub fn from_flat(dims: PolicyDims, data: Vec<f64>) -> Result<Self, PolicyError> {
        dims.validate()?;
        let expected = Layout::new(&dims).end;
        if data.len() != expected {
            return Err(PolicyError::ShapeMismatch(format!(
                "{} parameters for dims needing {expected}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(name, values)` for every tensor in declared order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let ranges = Layout::new(&self.dims).ranges();
        TENSOR_NAMES
            .iter()
            .zip(ranges)
            .map(|(name, r)| (*name, &self.data[r]))
            .collect()
    }

    /// Index ranges of each tensor inside the flat buffer.
    pub fn tensor_ranges(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        TENSOR_NAMES
            .iter()
            .copied()
            .zip(Layout::new(&self.dims).ranges())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * direction`
    pub fn add_scaled(&mut self, direction: &[f64], scale: f64) {
        assert_eq!(direction.len(), self.data.len());
        for (p, d) in self.data.iter_mut().zip(direction) {
            *p += scale * d;
        }
    }

    pub fn eos(&self) -> Token {
        self.dims.eos()
    }
}

/// Observation features and task label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub observation: Vec<f64>,
    pub instruction_id: usize,
}

/// Per-position activations kept for backpropagation.
struct Step {
    prev: Token,
    state: Vec<f64>,
    hidden: Vec<f64>,
    /// softmax at temperature 1
    probs: Vec<f64>,
    log_norm: f64,
    logits: Vec<f64>,
}

struct Forward {
    steps: Vec<Step>,
}

fn check_context(dims: &PolicyDims, ctx: &PromptContext) -> Result<(), PolicyError> {
    if ctx.observation.len() != dims.features {
        return Err(PolicyError::ObservationShape {
            expected: dims.features,
            found: ctx.observation.len(),
        });
    }
    if ctx.instruction_id >= dims.instructions {
        return Err(PolicyError::UnknownInstruction {
            id: ctx.instruction_id,
            max: dims.instructions,
        });
    }
    Ok(())
}

fn check_tokens(dims: &PolicyDims, tokens: &[Token]) -> Result<(), PolicyError> {
    if tokens.len() > dims.max_len {
        return Err(PolicyError::TooLong {
            len: tokens.len(),
            max: dims.max_len,
        });
    }
    if let Some(position) = tokens.iter().position(|&t| t as usize >= dims.vocab) {
        return Err(PolicyError::OutOfVocabulary {
            position,
            token: tokens[position],
            vocab: dims.vocab,
        });
    }
    Ok(())
}

impl PolicyParams {
    fn project_observation(&self, ctx: &PromptContext) -> Vec<f64> {
        let d = &self.dims;
        let l = Layout::new(d);
        let e = d.embed;
        let mut out = vec![0.0; e];
        for (f, &x) in ctx.observation.iter().enumerate() {
            let row = &self.data[l.obs + f * e..l.obs + (f + 1) * e];
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        out
    }

    fn step(&self, ctx: &PromptContext, obs_out: &[f64], t: usize, prev: Token) -> Step {
        let d = &self.dims;
        let l = Layout::new(d);
        let e = d.embed;
        let mut state = Vec::with_capacity(3 * e);
        let instr = l.instr + ctx.instruction_id * e;
        state.extend_from_slice(&self.data[instr..instr + e]);
        let tok = l.tok + prev as usize * e;
        let pos = l.pos + t * e;
        state.extend((0..e).map(|k| self.data[tok + k] + self.data[pos + k]));
        state.extend_from_slice(obs_out);

        let hd = d.hidden;
        let mut hidden = self.data[l.b1..l.b1 + hd].to_vec();
        for (i, &s) in state.iter().enumerate() {
            let row = &self.data[l.w1 + i * hd..l.w1 + (i + 1) * hd];
            for (h, w) in hidden.iter_mut().zip(row) {
                *h += s * w;
            }
        }
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }

        let v = d.vocab;
        let mut logits = self.data[l.b2..l.b2 + v].to_vec();
        for (k, &h) in hidden.iter().enumerate() {
            let row = &self.data[l.w2 + k * v..l.w2 + (k + 1) * v];
            for (z, w) in logits.iter_mut().zip(row) {
                *z += h * w;
            }
        }
        let (probs, log_norm) = softmax(&logits, 1.0);
        Step {
            prev,
            state,
            hidden,
            probs,
            log_norm,
            logits,
        }
    }

    fn forward(&self, ctx: &PromptContext, tokens: &[Token]) -> Forward {
        let obs_out = self.project_observation(ctx);
        let eos = self.eos();
        let steps = (0..tokens.len())
            .map(|t| {
                let prev = if t == 0 { eos } else { tokens[t - 1] };
                self.step(ctx, &obs_out, t, prev)
            })
            .collect();
        Forward { steps }
    }

    /// Accumulates `d/dparams sum_t coeffs[t] * log p(tokens[t])` into `grad`.
    fn backward(&self, ctx: &PromptContext, tokens: &[Token], fwd: &Forward, coeffs: &[f64], grad: &mut [f64]) {
        let d = &self.dims;
        let l = Layout::new(d);
        let (e, hd, v) = (d.embed, d.hidden, d.vocab);
        let mut d_obs_out = vec![0.0; e];
        let mut d_logits = vec![0.0; v];
        let mut d_pre = vec![0.0; hd];
        for (t, step) in fwd.steps.iter().enumerate() {
            let c = coeffs[t];
            if c == 0.0 {
                continue;
            }
            for (g, p) in d_logits.iter_mut().zip(&step.probs) {
                *g = -c * p;
            }
            d_logits[tokens[t] as usize] += c;

            for (bias, g) in grad[l.b2..l.b2 + v].iter_mut().zip(&d_logits) {
                *bias += g;
            }
            for k in 0..hd {
                let h = step.hidden[k];
                let w_row = &self.data[l.w2 + k * v..l.w2 + (k + 1) * v];
                let g_row = &mut grad[l.w2 + k * v..l.w2 + (k + 1) * v];
                let mut dh = 0.0;
                for j in 0..v {
                    g_row[j] += h * d_logits[j];
                    dh += w_row[j] * d_logits[j];
                }
                d_pre[k] = dh * (1.0 - h * h);
            }
            for (bias, g) in grad[l.b1..l.b1 + hd].iter_mut().zip(&d_pre) {
                *bias += g;
            }
            let instr = l.instr + ctx.instruction_id * e;
            let tok = l.tok + step.prev as usize * e;
            let pos = l.pos + t * e;
            for (i, &s) in step.state.iter().enumerate() {
                let w_row = &self.data[l.w1 + i * hd..l.w1 + (i + 1) * hd];
                let g_row = &mut grad[l.w1 + i * hd..l.w1 + (i + 1) * hd];
                let mut ds = 0.0;
                for k in 0..hd {
                    g_row[k] += s * d_pre[k];
                    ds += w_row[k] * d_pre[k];
                }
                match i / e {
                    0 => grad[instr + i] += ds,
                    1 => {
                        grad[tok + i - e] += ds;
                        grad[pos + i - e] += ds;
                    }
                    _ => d_obs_out[i - 2 * e] += ds,
                }
            }
        }
        for (f, &x) in ctx.observation.iter().enumerate() {
            let g_row = &mut grad[l.obs + f * e..l.obs + (f + 1) * e];
            for (g, dv) in g_row.iter_mut().zip(&d_obs_out) {
                *g += x * dv;
            }
        }
    }
}

/// Softmax of `logits / temperature` and the log-partition of the scaled logits.
fn softmax(logits: &[f64], temperature: f64) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let mut probs: Vec<f64> = logits.iter().map(|z| (z / temperature - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    (probs, max + sum.ln())
}

impl Step {
    fn log_prob(&self, token: Token) -> f64 {
        self.logits[token as usize] - self.log_norm
    }
}

/// Per-token log-probabilities of `tokens` at temperature 1.
pub fn log_probs(params: &PolicyParams, ctx: &PromptContext, tokens: &[Token]) -> Result<Vec<f64>, PolicyError> {
    check_context(&params.dims, ctx)?;
    check_tokens(&params.dims, tokens)?;
    let fwd = params.forward(ctx, tokens);
    Ok(fwd.steps.iter().zip(tokens).map(|(s, &tok)| s.log_prob(tok)).collect())
}

/// Full next-token distribution after `prefix`, temperature 1.
pub fn next_token_probs(params: &PolicyParams, ctx: &PromptContext, prefix: &[Token]) -> Result<Vec<f64>, PolicyError> {
    check_context(&params.dims, ctx)?;
    check_tokens(&params.dims, prefix)?;
    if prefix.len() >= params.dims.max_len {
        return Err(PolicyError::TooLong {
            len: prefix.len() + 1,
            max: params.dims.max_len,
        });
    }
    let obs_out = params.project_observation(ctx);
    let prev = prefix.last().copied().unwrap_or(params.eos());
    Ok(params.step(ctx, &obs_out, prefix.len(), prev).probs)
}

/// `G` sequences sampled for one prompt, with the log-probabilities the
/// sampler assigned to them. Sequences keep their trailing end-of-chunk id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub context: PromptContext,
    pub sequences: Vec<TokenSequence>,
    pub logps: Vec<Vec<f64>>,
    pub eos: Token,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Sequence `i` without its end-of-chunk token.
    pub fn action_tokens(&self, i: usize) -> &[Token] {
        strip_eos(&self.sequences[i], self.eos)
    }
}

pub fn strip_eos(tokens: &[Token], eos: Token) -> &[Token] {
    match tokens.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => tokens,
    }
}

enum Decoding<'a> {
    Greedy,
    Sample { temperature: f64, rng: &'a mut ChaCha8Rng },
}

fn generate(params: &PolicyParams, ctx: &PromptContext, mut decoding: Decoding<'_>) -> (Vec<Token>, Vec<f64>) {
    let eos = params.eos();
    let obs_out = params.project_observation(ctx);
    let mut tokens = Vec::new();
    let mut logps = Vec::new();
    let mut prev = eos;
    for t in 0..params.dims.max_len {
        let step = params.step(ctx, &obs_out, t, prev);
        let tok = match &mut decoding {
            Decoding::Greedy => argmax(&step.logits),
            Decoding::Sample { temperature, rng } => {
                let (probs, _) = softmax(&step.logits, *temperature);
                categorical(&probs, rng.random::<f64>())
            }
        };
        logps.push(step.log_prob(tok));
        tokens.push(tok);
        if tok == eos {
            break;
        }
        prev = tok;
    }
    (tokens, logps)
}

fn argmax(values: &[f64]) -> Token {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as Token
}

fn categorical(probs: &[f64], u: f64) -> Token {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as Token;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1) as Token
}

/// Draws `cfg.group_size` sequences. Sequence `i` uses its own ChaCha stream
/// `i` of `seed`, so the batch does not depend on evaluation order.
pub fn sample_group(params: &PolicyParams, ctx: &PromptContext, cfg: &GrpoConfig, seed: u64) -> Result<SampleBatch, PolicyError> {
    sample_n(params, ctx, cfg.group_size, cfg.temperature, seed)
}

pub fn sample_n(
    params: &PolicyParams,
    ctx: &PromptContext,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<SampleBatch, PolicyError> {
    check_context(&params.dims, ctx)?;
    let mut sequences = Vec::with_capacity(n);
    let mut logps = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (tokens, lp) = generate(params, ctx, Decoding::Sample {
            temperature,
            rng: &mut rng,
        });
        sequences.push(TokenSequence(tokens));
        logps.push(lp);
    }
    Ok(SampleBatch {
        context: ctx.clone(),
        sequences,
        logps,
        eos: params.eos(),
    })
}

/// Argmax decoding, end-of-chunk token stripped.
pub fn greedy(params: &PolicyParams, ctx: &PromptContext) -> Result<TokenSequence, PolicyError> {
    check_context(&params.dims, ctx)?;
    let (mut tokens, _) = generate(params, ctx, Decoding::Greedy);
    if tokens.last() == Some(&params.eos()) {
        tokens.pop();
    }
    Ok(TokenSequence(tokens))
}

/// Action tokens followed by the end-of-chunk id.
pub fn sft_target(params: &PolicyParams, gt: &[Token], spec: &CodecSpec) -> Result<Vec<Token>, PolicyError> {
    codec::expand(gt, spec).map_err(PolicyError::InvalidTarget)?;
    let mut target = gt.to_vec();
    target.push(params.eos());
    check_tokens(&params.dims, &target)?;
    Ok(target)
}

/// Mean token negative log-likelihood of `target` and its gradient.
pub fn sft_loss_and_grad(params: &PolicyParams, ctx: &PromptContext, target: &[Token]) -> Result<(f64, Vec<f64>), PolicyError> {
    check_context(&params.dims, ctx)?;
    check_tokens(&params.dims, target)?;
    let mut grad = vec![0.0; params.len()];
    if target.is_empty() {
        return Ok((0.0, grad));
    }
    let fwd = params.forward(ctx, target);
    let n = target.len() as f64;
    let loss = -fwd.steps.iter().zip(target).map(|(s, &t)| s.log_prob(t)).sum::<f64>() / n;
    // descent direction of the loss is the ascent direction of the mean log-prob
    let coeffs = vec![-1.0 / n; target.len()];
    params.backward(ctx, target, &fwd, &coeffs, &mut grad);
    Ok((loss, grad))
}

/// One plain gradient step on the token cross-entropy of `gt`; returns the
/// updated parameters and the loss before the step.
pub fn sft_update(
    params: &PolicyParams,
    ctx: &PromptContext,
    gt: &[Token],
    spec: &CodecSpec,
    lr: f64,
) -> Result<(PolicyParams, f64), PolicyError> {
    let target = sft_target(params, gt, spec)?;
    let (loss, grad) = sft_loss_and_grad(params, ctx, &target)?;
    let mut next = params.clone();
    if lr != 0.0 {
        next.add_scaled(&grad, -lr);
    }
    Ok((next, loss))
}

/// Objective of one sampled group and its gradient.
#[derive(Debug, Clone)]
pub struct RftEval {
    pub objective: f64,
    pub grad: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

/// Builds the rollout group for `batch` (old log-probs as sampled, reference
/// log-probs from `ref_params`) and differentiates the clipped objective.
pub fn rft_objective_and_grad(
    params: &PolicyParams,
    batch: &SampleBatch,
    rewards: &[f64],
    ref_params: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<RftEval, PolicyError> {
    if rewards.len() != batch.len() || batch.logps.len() != batch.len() {
        return Err(PolicyError::ShapeMismatch(format!(
            "{} sequences, {} log-prob lists, {} rewards",
            batch.len(),
            batch.logps.len(),
            rewards.len()
        )));
    }
    if ref_params.dims != params.dims {
        return Err(PolicyError::ShapeMismatch("reference policy has different dims".into()));
    }
    check_context(&params.dims, &batch.context)?;
    let advantages = grpo::compute_advantages(rewards, cfg.std_floor)?;
    let ctx = &batch.context;
    let mut ref_logps = Vec::with_capacity(batch.len());
    let mut new_logps = Vec::with_capacity(batch.len());
    let mut forwards = Vec::with_capacity(batch.len());
    for seq in &batch.sequences {
        check_tokens(&params.dims, seq)?;
        ref_logps.push(log_probs(ref_params, ctx, seq)?);
        let fwd = params.forward(ctx, seq);
        new_logps.push(fwd.steps.iter().zip(seq.iter()).map(|(s, &t)| s.log_prob(t)).collect::<Vec<_>>());
        forwards.push(fwd);
    }
    let group = RolloutGroup {
        prompt_id: ctx.instruction_id as u64,
        sequences: batch.sequences.clone(),
        old_logps: batch.logps.clone(),
        ref_logps,
        rewards: rewards.to_vec(),
    };
    let eval = grpo::grpo_objective_with_grad(&group, &new_logps, &advantages, cfg)?;
    let mut grad = vec![0.0; params.len()];
    for ((seq, fwd), coeffs) in batch.sequences.iter().zip(&forwards).zip(&eval.grad_logp) {
        params.backward(ctx, seq, fwd, coeffs, &mut grad);
    }
    Ok(RftEval {
        objective: eval.value,
        grad,
        advantages: advantages.0,
        mean_kl: eval.mean_kl,
        clip_fraction: eval.clip_fraction,
    })
}

/// One plain gradient-ascent step on the group objective; returns the updated
/// parameters and the objective before the step.
pub fn rft_update(
    params: &PolicyParams,
    batch: &SampleBatch,
    rewards: &[f64],
    ref_params: &PolicyParams,
    cfg: &GrpoConfig,
    lr: f64,
) -> Result<(PolicyParams, f64), PolicyError> {
    let eval = rft_objective_and_grad(params, batch, rewards, ref_params, cfg)?;
    let mut next = params.clone();
    if lr != 0.0 {
        next.add_scaled(&eval.grad, lr);
    }
    Ok((next, eval.objective))
}

/// Adam with decoupled weight decay. `step` takes a descent gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &[f64]) {
        assert_eq!(grad.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            *p -= self.lr * (update + self.weight_decay * *p);
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"LLRFT1";

/// Little-endian checkpoint: magic, six `u32` dims (F, E, Hd, V_tok, L_max,
/// T_max), then every tensor in declared order as `f64`.
pub fn checkpoint_bytes(params: &PolicyParams) -> Vec<u8> {
    let d = &params.dims;
    let mut out = Vec::with_capacity(6 + 24 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [d.features, d.embed, d.hidden, d.vocab, d.max_len, d.instructions] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &params.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn params_from_checkpoint(bytes: &[u8]) -> Result<PolicyParams, PolicyError> {
    let header = 6 + 6 * 4;
    if bytes.len() < header || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(PolicyError::Checkpoint("missing LLRFT1 header".into()));
    }
    let dim = |i: usize| {
        let at = 6 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
    };
    let dims = PolicyDims {
        features: dim(0),
        embed: dim(1),
        hidden: dim(2),
        vocab: dim(3),
        max_len: dim(4),
        instructions: dim(5),
    };
    dims.validate()?;
    let body = &bytes[header..];
    let expected = Layout::new(&dims).end;
    if body.len() != 8 * expected {
        return Err(PolicyError::Checkpoint(format!(
            "body holds {} bytes, dims need {}",
            body.len(),
            8 * expected
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    PolicyParams::from_flat(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> PolicyDims {
        PolicyDims {
            features: 2,
            embed: 4,
            hidden: 8,
            vocab: 6,
            max_len: 6,
            instructions: 3,
        }
    }

    fn ctx() -> PromptContext {
        PromptContext {
            observation: vec![0.3, -0.2],
            instruction_id: 1,
        }
    }

    #[test]
    fn uniform_at_zero_output_layer() {
        let p = PolicyParams::init(small_dims(), InitConfig::default(), 1).unwrap();
        let lp = log_probs(&p, &ctx(), &[0, 3, 2]).unwrap();
        for v in lp {
            assert!((v + 6f64.ln()).abs() < 1e-12);
        }
        let mut dims = small_dims();
        dims.vocab = 4;
        let p = PolicyParams::init(dims, InitConfig::default(), 1).unwrap();
        let lp = log_probs(&p, &ctx(), &[1]).unwrap();
        assert!((lp[0] + 1.386294).abs() < 1e-6);
    }

    #[test]
    fn next_token_distribution_normalized() {
        let init = InitConfig {
            output_std: 0.7,
            ..InitConfig::default()
        };
        let p = PolicyParams::init(small_dims(), init, 9).unwrap();
        for prefix in [&[][..], &[1], &[1, 4, 2]] {
            let probs = next_token_probs(&p, &ctx(), prefix).unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PolicyParams::init(small_dims(), InitConfig::default(), 1).unwrap();
        assert!(matches!(
            log_probs(&p, &ctx(), &[6]),
            Err(PolicyError::OutOfVocabulary { .. })
        ));
        assert!(matches!(
            log_probs(&p, &ctx(), &[0; 7]),
            Err(PolicyError::TooLong { .. })
        ));
        let bad = PromptContext {
            observation: vec![0.0],
            instruction_id: 0,
        };
        assert!(log_probs(&p, &bad, &[0]).is_err());
        let bad = PromptContext {
            observation: vec![0.0, 0.0],
            instruction_id: 3,
        };
        assert!(log_probs(&p, &bad, &[0]).is_err());
    }

    #[test]
    fn sampled_logps_match_rescoring() {
        let init = InitConfig {
            output_std: 1.0,
            ..InitConfig::default()
        };
        let p = PolicyParams::init(small_dims(), init, 4).unwrap();
        let cfg = GrpoConfig::PAPER;
        let batch = sample_group(&p, &ctx(), &cfg, 77).unwrap();
        assert_eq!(batch.len(), 8);
        for (seq, lp) in batch.sequences.iter().zip(&batch.logps) {
            let again = log_probs(&p, &ctx(), seq).unwrap();
            for (a, b) in lp.iter().zip(&again) {
                assert!((a - b).abs() < 1e-12);
                assert!(*a <= 0.0);
            }
            assert!(seq.len() <= 6);
            if seq.len() < 6 {
                assert_eq!(*seq.last().unwrap(), p.eos());
            }
        }
        assert_eq!(batch, sample_group(&p, &ctx(), &cfg, 77).unwrap());
    }

    #[test]
    fn greedy_follows_argmax() {
        let init = InitConfig {
            output_std: 1.0,
            ..InitConfig::default()
        };
        let p = PolicyParams::init(small_dims(), init, 5).unwrap();
        let seq = greedy(&p, &ctx()).unwrap();
        let mut prefix = Vec::new();
        for &tok in seq.iter() {
            let probs = next_token_probs(&p, &ctx(), &prefix).unwrap();
            let best = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(tok as usize, best);
            prefix.push(tok);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let init = InitConfig {
            output_std: 0.3,
            ..InitConfig::default()
        };
        let p = PolicyParams::init(small_dims(), init, 8).unwrap();
        let bytes = checkpoint_bytes(&p);
        assert_eq!(&bytes[..6], b"LLRFT1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        assert_eq!(params_from_checkpoint(&bytes).unwrap(), p);
        assert!(params_from_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(params_from_checkpoint(b"nope").is_err());
    }

    #[test]
    fn tensor_table_covers_buffer() {
        let p = PolicyParams::zeros(small_dims()).unwrap();
        let total: usize = p.tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(total, p.len());
        assert_eq!(p.tensors()[4].1.len(), 12 * 8);
    }

    #[test]
    fn strip_eos_only_strips_trailing() {
        assert_eq!(strip_eos(&[1, 2, 5], 5), &[1, 2]);
        assert_eq!(strip_eos(&[1, 2], 5), &[1, 2]);
        assert_eq!(strip_eos(&[], 5), &[] as &[Token]);
    }
}
