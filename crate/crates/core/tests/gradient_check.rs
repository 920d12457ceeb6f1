//! Hand-derived gradients vs central finite differences.

mod common;

use common::{numerical_grad, small_ctx as ctx, small_params as params, worst_relative_error, TOL};
use llrft_core::grpo::{GrpoConfig, RatioMode};
use llrft_core::policy::{self, SampleBatch};

#[test]
fn sft_loss_gradient_matches_differences() {
    let p = params(11);
    let target = [3, 1, 1, 0, 5];
    let (_, analytic) = policy::sft_loss_and_grad(&p, &ctx(), &target).unwrap();
    let numeric = numerical_grad(&p, |q| policy::sft_loss_and_grad(q, &ctx(), &target).unwrap().0);
    let (rel, name) = worst_relative_error(&p, &analytic, &numeric);
    assert!(rel < TOL, "sft/{name}: relative error {rel:e}");
}

fn shifted_batch(p: &policy::PolicyParams) -> (SampleBatch, Vec<f64>) {
    let cfg = GrpoConfig::PAPER;
    let mut batch = policy::sample_group(p, &ctx(), &cfg, 5).unwrap();
    // move the old policy away from the current one so ratios differ from 1
    // but stay away from the clip boundaries
    for (i, lp) in batch.logps.iter_mut().enumerate() {
        for (t, v) in lp.iter_mut().enumerate() {
            *v += 0.03 * (((i * 7 + t * 3) % 5) as f64 - 2.0);
        }
    }
    let rewards = (0..batch.len()).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
    (batch, rewards)
}

#[test]
fn grpo_objective_gradient_matches_differences() {
    let p = params(12);
    let reference = params(13);
    let (batch, rewards) = shifted_batch(&p);
    for mode in [RatioMode::PerToken, RatioMode::Sequence] {
        let cfg = GrpoConfig {
            kl_coeff: 0.05,
            ratio_mode: mode,
            ..GrpoConfig::PAPER
        };
        let eval = policy::rft_objective_and_grad(&p, &batch, &rewards, &reference, &cfg).unwrap();
        let numeric = numerical_grad(&p, |q| {
            policy::rft_objective_and_grad(q, &batch, &rewards, &reference, &cfg)
                .unwrap()
                .objective
        });
        let (rel, name) = worst_relative_error(&p, &eval.grad, &numeric);
        assert!(rel < TOL, "grpo-{mode:?}/{name}: relative error {rel:e}");
    }
}

#[test]
fn rft_fixed_point_when_nothing_to_learn() {
    let p = params(3);
    let cfg = GrpoConfig::PAPER;
    let batch = policy::sample_group(&p, &ctx(), &cfg, 9).unwrap();
    let rewards = vec![0.4; batch.len()];
    let (next, objective) = policy::rft_update(&p, &batch, &rewards, &p, &cfg, 0.1).unwrap();
    assert_eq!(objective, 0.0);
    assert_eq!(next, p);
}

#[test]
fn positive_advantage_sequence_gains_probability() {
    let p = params(21);
    let cfg = GrpoConfig {
        kl_coeff: 0.0,
        ..GrpoConfig::PAPER
    };
    let batch = policy::sample_group(&p, &ctx(), &cfg, 2).unwrap();
    let mut rewards = vec![0.0; batch.len()];
    rewards[3] = 1.0;
    let before: f64 = batch.logps[3].iter().sum();
    let (next, _) = policy::rft_update(&p, &batch, &rewards, &p, &cfg, 1e-3).unwrap();
    let after: f64 = policy::log_probs(&next, &ctx(), &batch.sequences[3]).unwrap().iter().sum();
    assert!(after >= before, "{after} < {before}");
}
