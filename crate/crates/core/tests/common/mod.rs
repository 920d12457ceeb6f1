//! Finite-difference helpers shared by the gradient tests.

use llrft_core::policy::{InitConfig, PolicyDims, PolicyParams, PromptContext};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn small_dims() -> PolicyDims {
    PolicyDims {
        features: 2,
        embed: 4,
        hidden: 8,
        vocab: 6,
        max_len: 6,
        instructions: 3,
    }
}

pub fn small_params(seed: u64) -> PolicyParams {
    PolicyParams::init(
        small_dims(),
        InitConfig {
            embed_std: 0.5,
            output_std: 0.6,
        },
        seed,
    )
    .unwrap()
}

pub fn small_ctx() -> PromptContext {
    PromptContext {
        observation: vec![0.4, -0.7],
        instruction_id: 2,
    }
}

/// Central differences of `f` over every coordinate of `p`.
pub fn numerical_grad(p: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    (0..p.len())
        .map(|i| {
            let orig = q.as_slice()[i];
            q.as_mut_slice()[i] = orig + STEP;
            let plus = f(&q);
            q.as_mut_slice()[i] = orig - STEP;
            let minus = f(&q);
            q.as_mut_slice()[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

/// Largest per-tensor relative L2 error; tensors where both gradients
/// vanish count as exact when they agree to 1e-9.
pub fn worst_relative_error(p: &PolicyParams, analytic: &[f64], numeric: &[f64]) -> (f64, &'static str) {
    let mut worst = (0.0, "");
    for (name, range) in p.tensor_ranges() {
        let a = &analytic[range.clone()];
        let n = &numeric[range];
        let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(a).max(norm(n));
        let rel = if scale < 1e-10 {
            if diff < 1e-9 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / scale
        };
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name);
        }
    }
    worst
}
