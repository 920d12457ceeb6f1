//! Acceptance suite: one PASS/FAIL line per criterion, each with its time
//! budget. Exits non-zero if any criterion fails.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use llrft_core::codec::{self, ActionChunk, CodecSpec, Compression, NormalizationStats};
use llrft_core::config::ExperimentConfig;
use llrft_core::continual::{compute_metrics, NbtConvention, SuccessMatrix, Trainer};
use llrft_core::experiment::{self, ablation_variants};
use llrft_core::grpo::{self, AdvantageVector, GrpoConfig, RolloutGroup};
use llrft_core::policy;
use llrft_core::reward::{self, RewardBreakdown, RewardConfig};

type Outcome = Result<String, String>;

/// Seed of the single-task efficacy run.
const EFFICACY_SEED: u64 = 0;
const CONTINUAL_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64, bad: &mut Vec<String>) {
    if !((got - want).abs() <= tol) {
        bad.push(format!("{name}: got {got}, want {want}"));
    }
}

fn reward_oracles() -> Outcome {
    let mut bad = Vec::new();
    let cfg = RewardConfig::PAPER;
    let rle = CodecSpec::new(2, 2, 4, Compression::RunLength, NormalizationStats::new(vec![-1.0; 2], vec![1.0; 2]).unwrap()).unwrap();
    let q = reward::qacr(&[0, 5, 0, 4, 2, 4], &[0, 6, 2, 4], &rle).unwrap();
    close("qacr", q, 0.333333, 1e-6, &mut bad);
    // bin centers 0.0, 0.1, ..., 0.9: pose (0.1, 0.2) against (0.2, 0.4)
    let grid = CodecSpec::new(1, 3, 10, Compression::None, NormalizationStats::new(vec![-0.05; 3], vec![0.95; 3]).unwrap()).unwrap();
    let c = reward::ctar(&[1, 2, 9], &[2, 4, 9], &grid, &cfg).unwrap();
    close("ctar", c, 0.577893, 1e-6, &mut bad);
    close("mdpr", RewardBreakdown::compose(q, c, 1.0, &cfg).mdpr, 0.506701, 1e-6, &mut bad);
    let perfect = reward::mdpr(&[0, 6, 2, 4], &[0, 6, 2, 4], &rle, &cfg).unwrap();
    close("mdpr perfect", perfect.mdpr, 1.1, 1e-12, &mut bad);
    let adv = grpo::compute_advantages(&[1.0, 0.0, 1.0, 0.0], 1e-8).unwrap();
    for (i, (a, w)) in adv.iter().zip([1.0, -1.0, 1.0, -1.0]).enumerate() {
        close(&format!("advantage {i}"), *a, w, 1e-6, &mut bad);
    }
    let adv = grpo::compute_advantages(&[0.2, 0.8], 1e-8).unwrap();
    close("advantage pair", adv[1], 1.0, 1e-6, &mut bad);
    close("kl", grpo::token_kl_estimate(-1.0, -1.5).unwrap(), 0.106531, 1e-6, &mut bad);
    close("kl reversed", grpo::token_kl_estimate(-1.5, -1.0).unwrap(), 0.148721, 1e-6, &mut bad);
    let single = |ratio: f64, adv: f64| {
        let group = RolloutGroup {
            prompt_id: 0,
            sequences: vec![vec![1].into()],
            old_logps: vec![vec![-1.0]],
            ref_logps: vec![vec![-1.0]],
            rewards: vec![0.0],
        };
        let cfg = GrpoConfig {
            kl_coeff: 0.0,
            ..GrpoConfig::PAPER
        };
        grpo::grpo_objective(&group, &[vec![-1.0 + ratio.ln()]], &AdvantageVector(vec![adv]), &cfg).unwrap()
    };
    close("clip upper", single(1.5, 1.0), 1.2, 1e-6, &mut bad);
    close("clip lower", single(0.5, -1.0), -0.8, 1e-6, &mut bad);
    close("clip identity", single(1.0, 2.0), 2.0, 1e-6, &mut bad);
    check(bad.is_empty(), if bad.is_empty() { "all worked examples within 1e-6".into() } else { bad.join("; ") })
}

fn codec_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_ratio: f64 = 0.0;
    let mut failures = 0usize;
    let mut n = 0;
    for compression in [Compression::None, Compression::RunLength] {
        for _ in 0..1000 {
            let h = rng.random_range(1..=8);
            let d = rng.random_range(2..=6);
            let q = rng.random_range(2..=64);
            let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..0.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.05..3.0)).collect();
            let mut stats = NormalizationStats::new(lo.clone(), hi.clone()).unwrap();
            stats.lower[d - 1] = 0.0;
            stats.upper[d - 1] = 1.0;
            let spec = CodecSpec::new(h, d, q, compression, stats).unwrap();
            let mut values = Vec::with_capacity(h * d);
            for t in 0..h {
                for j in 0..d {
                    let v = if j == d - 1 {
                        f64::from(rng.random_bool(0.5))
                    } else if t > 0 && rng.random_bool(0.3) {
                        values[(t - 1) * d + j]
                    } else {
                        rng.random_range(lo[j]..=hi[j])
                    };
                    values.push(v);
                }
            }
            let chunk = ActionChunk::new(h, d, values).unwrap();
            let tokens = codec::encode(&chunk, &spec).unwrap();
            n += 1;
            if !codec::format_check(&tokens, &spec) {
                failures += 1;
                continue;
            }
            let back = codec::decode(&tokens, &spec).unwrap();
            for t in 0..h {
                if back.grip(t) != chunk.grip(t) {
                    failures += 1;
                }
                for j in 0..d - 1 {
                    let ratio = (back.get(t, j) - chunk.get(t, j)).abs() / (spec.bin_width(j) / 2.0);
                    worst_ratio = worst_ratio.max(ratio);
                }
            }
        }
    }
    let ok = failures == 0 && worst_ratio <= 1.0 + 1e-9;
    check(ok, format!("{n} chunks, worst error {worst_ratio:.6} half-bins, {failures} format/gripper failures"))
}

fn gradient_checks() -> Outcome {
    use common::*;
    let mut lines = Vec::new();
    let mut ok = true;
    let p = small_params(11);
    let target = [3, 1, 1, 0, 5];
    let (_, analytic) = policy::sft_loss_and_grad(&p, &small_ctx(), &target).unwrap();
    let numeric = numerical_grad(&p, |q| policy::sft_loss_and_grad(q, &small_ctx(), &target).unwrap().0);
    let (rel, name) = worst_relative_error(&p, &analytic, &numeric);
    ok &= rel < TOL;
    lines.push(format!("sft {rel:.1e} ({name})"));
    let reference = small_params(13);
    let mut batch = policy::sample_group(&p, &small_ctx(), &GrpoConfig::PAPER, 5).unwrap();
    for (i, lp) in batch.logps.iter_mut().enumerate() {
        for (t, v) in lp.iter_mut().enumerate() {
            *v += 0.03 * (((i * 7 + t * 3) % 5) as f64 - 2.0);
        }
    }
    let rewards: Vec<f64> = (0..batch.len()).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
    let cfg = GrpoConfig {
        kl_coeff: 0.05,
        ..GrpoConfig::PAPER
    };
    let eval = policy::rft_objective_and_grad(&p, &batch, &rewards, &reference, &cfg).unwrap();
    let numeric = numerical_grad(&p, |q| policy::rft_objective_and_grad(q, &batch, &rewards, &reference, &cfg).unwrap().objective);
    let (rel, name) = worst_relative_error(&p, &eval.grad, &numeric);
    ok &= rel < TOL;
    lines.push(format!("grpo {rel:.1e} ({name})"));
    check(ok, format!("worst relative error: {}", lines.join(", ")))
}

/// Literal loops over the metric definitions, 1-based like the formulas.
fn brute_force(s: &SuccessMatrix) -> (f64, f64, f64) {
    let k_total = s.k();
    let at = |k: usize, j: usize| s.rows[k - 1][j - 1];
    let mut fwt = 0.0;
    for k in 1..=k_total {
        fwt += at(k, k);
    }
    fwt /= k_total as f64;
    let mut nbt = 0.0;
    let mut auc = 0.0;
    for k in 1..=k_total {
        let mut nbt_k = 0.0;
        if k < k_total {
            for q in k + 1..=k_total {
                nbt_k += at(k, k) - at(q, k);
            }
            nbt_k /= (k_total - k) as f64;
        }
        nbt += nbt_k;
        let mut auc_k = at(k, k);
        for q in k + 1..=k_total {
            auc_k += at(q, k);
        }
        auc += auc_k / (k_total - k + 1) as f64;
    }
    (fwt, nbt / k_total as f64, auc / k_total as f64)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=10);
        let rows = (0..k).map(|r| (0..=r).map(|_| rng.random_range(0.0..=1.0)).collect()).collect();
        let s = SuccessMatrix::new(rows).unwrap();
        let m = compute_metrics(&s, NbtConvention::default()).unwrap();
        let (fwt, nbt, auc) = brute_force(&s);
        worst = worst.max((m.fwt - fwt).abs()).max((m.nbt - nbt).abs()).max((m.auc - auc).abs());
    }
    let hand = compute_metrics(&SuccessMatrix::new(vec![vec![0.8], vec![0.6, 0.9]]).unwrap(), NbtConvention::default()).unwrap();
    let hand_ok = (hand.fwt - 0.85).abs() < 1e-12 && (hand.nbt - 0.1).abs() < 1e-12 && (hand.auc - 0.8).abs() < 1e-12;
    check(
        worst <= 1e-12 && hand_ok,
        format!(
            "1000 matrices, worst deviation {worst:.1e}; K=2 case FWT {:.4} NBT {:.4} AUC {:.4}",
            hand.fwt, hand.nbt, hand.auc
        ),
    )
}

fn desk(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = seed;
    cfg
}

fn rft_efficacy() -> Outcome {
    let cfg = desk(EFFICACY_SEED);
    let data = experiment::build_dataset(&cfg).map_err(|e| e.to_string())?;
    let (r, _) = experiment::run_single_task(&cfg, &data, &cfg.reward).map_err(|e| e.to_string())?;
    let gain = r.mdpr_gain();
    check(
        gain >= 0.2 && r.success_after >= 0.8,
        format!(
            "mean group MDPR {:.4} -> {:.4} (+{gain:.4}) in {} steps, greedy success {:.2} -> {:.2} on {} held-out observations",
            r.initial.mean_mdpr,
            r.final_point.mean_mdpr,
            cfg.single.rft_steps,
            r.success_before,
            r.success_after,
            cfg.single.eval_episodes
        ),
    )
}

fn continual_directionality() -> Outcome {
    let mut auc = [0.0; 2];
    let mut nbt = [0.0; 2];
    let mut fwt = [0.0; 2];
    for &seed in &CONTINUAL_SEEDS {
        for (i, trainer) in [Trainer::Sft, Trainer::Rft].into_iter().enumerate() {
            let cfg = experiment::with_trainer(&desk(seed), trainer);
            let (report, _) = experiment::run_continual(&cfg).map_err(|e| e.to_string())?;
            auc[i] += report.auc / CONTINUAL_SEEDS.len() as f64;
            nbt[i] += report.nbt / CONTINUAL_SEEDS.len() as f64;
            fwt[i] += report.fwt / CONTINUAL_SEEDS.len() as f64;
        }
    }
    check(
        auc[1] >= auc[0] + 0.10 && nbt[1] < nbt[0],
        format!(
            "SFT AUC {:.3} NBT {:.3} FWT {:.3} | RFT AUC {:.3} NBT {:.3} FWT {:.3} (need AUC gap >= 0.10, got {:+.3})",
            auc[0],
            nbt[0],
            fwt[0],
            auc[1],
            nbt[1],
            fwt[1],
            auc[1] - auc[0]
        ),
    )
}

fn ablation_directionality() -> Outcome {
    let variants = ablation_variants(&RewardConfig::PAPER);
    let (full, no_ctar) = (variants[0].1, variants[2].1);
    let mut success = [0.0; 2];
    let mut mdpr = [0.0; 2];
    for &seed in &ABLATION_SEEDS {
        let cfg = desk(seed);
        let data = experiment::build_dataset(&cfg).map_err(|e| e.to_string())?;
        for (i, reward) in [full, no_ctar].iter().enumerate() {
            let (r, _) = experiment::run_single_task(&cfg, &data, reward).map_err(|e| e.to_string())?;
            success[i] += r.success_after / ABLATION_SEEDS.len() as f64;
            mdpr[i] += r.final_point.mean_mdpr / ABLATION_SEEDS.len() as f64;
        }
    }
    check(
        success[1] < success[0],
        format!(
            "mean final success: full {:.3}, without CTAR {:.3} (final mean group MDPR {:.4} vs {:.4})",
            success[0], success[1], mdpr[0], mdpr[1]
        ),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("desk.json");
    std::fs::write(&config, ExperimentConfig::desk().to_json()).map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("report{run}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_llrft"))
            .args(["continual", "--config"])
            .arg(&config)
            .args(["--seed", "7", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("run {run} exited with {}: {}", status.status, String::from_utf8_lossy(&status.stderr)));
        }
        reports.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    check(reports[0] == reports[1], format!("two runs, {} bytes each, identical: {}", reports[0].len(), reports[0] == reports[1]))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("reward oracle suite", Duration::from_secs(1), reward_oracles),
        ("codec round trip", Duration::from_secs(5), codec_round_trip),
        ("gradient checks", Duration::from_secs(30), gradient_checks),
        ("metric oracle", Duration::from_secs(5), metric_oracle),
        ("rft efficacy", Duration::from_secs(600), rft_efficacy),
        ("continual directionality", Duration::from_secs(45 * 60), continual_directionality),
        ("ablation directionality", Duration::from_secs(20 * 60), ablation_directionality),
        ("cli determinism", Duration::from_secs(30 * 60), cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let (verdict, detail) = match outcome {
            Ok(d) if took <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over time budget")),
            Err(d) => ("FAIL", d),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("{verdict} {name}: {detail} [{:.1}s / {}s]", took.as_secs_f64(), budget.as_secs());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
