//! Synthetic manipulation tasks.
//!
//! A task moves the end effector from a (noisy) start pose to a goal pose
//! along a straight line with a sinusoidal wobble, closing the gripper at a
//! fixed step. The observation handed to the policy is the noisy start pose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ActionChunk, CodecError, CodecSpec};
use crate::policy::PromptContext;

/// Fraction of each pose range kept free around sampled start/goal offsets.
const OFFSET_MARGIN: f64 = 0.15;
/// Largest wobble amplitude as a fraction of the pose range.
const MAX_WOBBLE: f64 = 0.05;
pub const MIN_GOAL_SEPARATION: f64 = 0.2;
const MAX_RESAMPLES: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("need at least one {0}")]
    Empty(&'static str),
    #[error("could not place {0} goals with separation {MIN_GOAL_SEPARATION}")]
    Crowded(usize),
    #[error("chunk shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("codec spec needs h >= 2 for trajectories, got {0}")]
    HorizonTooShort(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub start_offset: Vec<f64>,
    pub goal_offset: Vec<f64>,
    pub wobble_amplitude: f64,
    pub wobble_frequency: f64,
    pub grip_close_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub context: PromptContext,
    pub chunk: ActionChunk,
    pub demo_index: usize,
}

impl Demonstration {
    pub fn task_id(&self) -> usize {
        self.context.instruction_id
    }
}

fn max_norm_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `n_tasks` tasks derived from `seed`, with goals pairwise at least
/// [`MIN_GOAL_SEPARATION`] apart in max-norm.
pub fn make_task_suite(n_tasks: usize, seed: u64, spec: &CodecSpec) -> Result<Vec<TaskSpec>, TaskError> {
    if n_tasks < 1 {
        return Err(TaskError::Empty("task"));
    }
    let pose = spec.d - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample_offset = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..pose)
            .map(|j| {
                let lo = spec.stats.lower[j];
                let w = spec.stats.width(j);
                rng.random_range(lo + OFFSET_MARGIN * w..=lo + (1.0 - OFFSET_MARGIN) * w)
            })
            .collect()
    };
    let mut suite: Vec<TaskSpec> = Vec::with_capacity(n_tasks);
    for task_id in 0..n_tasks {
        let start_offset = sample_offset(&mut rng);
        let mut goal_offset = sample_offset(&mut rng);
        let mut attempts = 0;
        while suite
            .iter()
            .any(|t| max_norm_distance(&t.goal_offset, &goal_offset) < MIN_GOAL_SEPARATION)
        {
            attempts += 1;
            if attempts > MAX_RESAMPLES {
                return Err(TaskError::Crowded(n_tasks));
            }
            goal_offset = sample_offset(&mut rng);
        }
        let min_width = (0..pose).map(|j| spec.stats.width(j)).fold(f64::INFINITY, f64::min);
        suite.push(TaskSpec {
            task_id,
            start_offset,
            goal_offset,
            wobble_amplitude: rng.random_range(0.0..=MAX_WOBBLE * min_width),
            wobble_frequency: rng.random_range(0.5..=2.0),
            grip_close_step: rng.random_range(0..=spec.h),
        });
    }
    Ok(suite)
}

/// Chunk for one observation. Pose follows the straight line from the
/// observation to the goal plus wobble; values are clamped into the codec
/// bounds.
pub fn trajectory(task: &TaskSpec, observation: &[f64], spec: &CodecSpec) -> Result<ActionChunk, TaskError> {
    let h = spec.h;
    if h < 2 {
        return Err(TaskError::HorizonTooShort(h));
    }
    let d = spec.d;
    let mut values = Vec::with_capacity(h * d);
    for t in 0..h {
        let frac = t as f64 / (h - 1) as f64;
        let wobble = task.wobble_amplitude * (task.wobble_frequency * t as f64).sin();
        for j in 0..d - 1 {
            let y = observation[j] + frac * (task.goal_offset[j] - observation[j]) + wobble;
            values.push(y.clamp(spec.stats.lower[j], spec.stats.upper[j]));
        }
        values.push(if t >= task.grip_close_step { 1.0 } else { 0.0 });
    }
    Ok(ActionChunk::new(h, d, values)?)
}

/// `n` demonstrations with observations `start_offset + U(-noise, noise)`.
/// Demonstration `i` draws from ChaCha stream `i` of `seed`.
pub fn generate_demos(
    task: &TaskSpec,
    n: usize,
    noise_scale: f64,
    seed: u64,
    spec: &CodecSpec,
) -> Result<Vec<Demonstration>, TaskError> {
    if n < 1 {
        return Err(TaskError::Empty("demonstration"));
    }
    (0..n)
        .map(|demo_index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(demo_index as u64);
            let observation: Vec<f64> = task
                .start_offset
                .iter()
                .map(|s| {
                    if noise_scale > 0.0 {
                        s + rng.random_range(-noise_scale..=noise_scale)
                    } else {
                        *s
                    }
                })
                .collect();
            let chunk = trajectory(task, &observation, spec)?;
            Ok(Demonstration {
                context: PromptContext {
                    observation,
                    instruction_id: task.task_id,
                },
                chunk,
                demo_index,
            })
        })
        .collect()
}

/// Every pose entry within `tol` and identical gripper columns.
pub fn is_success(pred: &ActionChunk, gt: &ActionChunk, tol: f64) -> Result<bool, TaskError> {
    if (pred.h(), pred.d()) != (gt.h(), gt.d()) {
        return Err(TaskError::ShapeMismatch((pred.h(), pred.d()), (gt.h(), gt.d())));
    }
    for t in 0..gt.h() {
        if pred.grip(t) != gt.grip(t) {
            return Ok(false);
        }
        if pred.pose(t).iter().zip(gt.pose(t)).any(|(a, b)| (a - b).abs() > tol) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{self, Compression, NormalizationStats};

    fn spec() -> CodecSpec {
        CodecSpec::new(8, 4, 32, Compression::None, NormalizationStats::uniform(4, -1.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn suite_is_seeded_and_separated() {
        let a = make_task_suite(10, 3, &spec()).unwrap();
        assert_eq!(a, make_task_suite(10, 3, &spec()).unwrap());
        assert_ne!(a, make_task_suite(10, 4, &spec()).unwrap());
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert!(max_norm_distance(&a[i].goal_offset, &a[j].goal_offset) >= 0.2);
            }
        }
        assert_eq!(make_task_suite(0, 3, &spec()), Err(TaskError::Empty("task")));
    }

    #[test]
    fn noiseless_straight_line_hits_endpoints() {
        let mut task = make_task_suite(1, 1, &spec()).unwrap().remove(0);
        task.wobble_amplitude = 0.0;
        let demo = generate_demos(&task, 1, 0.0, 0, &spec()).unwrap().remove(0);
        assert_eq!(demo.context.observation, task.start_offset);
        assert_eq!(demo.chunk.pose(0), &task.start_offset[..]);
        for (a, b) in demo.chunk.pose(7).iter().zip(&task.goal_offset) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn grip_closes_at_step() {
        let mut task = make_task_suite(1, 1, &spec()).unwrap().remove(0);
        task.grip_close_step = 0;
        let demo = generate_demos(&task, 1, 0.05, 0, &spec()).unwrap().remove(0);
        assert!((0..8).all(|t| demo.chunk.grip(t) == 1.0));
        task.grip_close_step = 3;
        let demo = generate_demos(&task, 1, 0.05, 0, &spec()).unwrap().remove(0);
        let grips: Vec<f64> = (0..8).map(|t| demo.chunk.grip(t)).collect();
        assert_eq!(grips, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn demos_are_seeded_and_encodable() {
        let suite = make_task_suite(4, 2, &spec()).unwrap();
        for task in &suite {
            let demos = generate_demos(task, 5, 0.05, 9, &spec()).unwrap();
            assert_eq!(demos, generate_demos(task, 5, 0.05, 9, &spec()).unwrap());
            for d in &demos {
                assert_eq!(d.task_id(), task.task_id);
                let toks = codec::encode(&d.chunk, &spec()).unwrap();
                assert!(codec::format_check(&toks, &spec()));
            }
        }
        assert!(generate_demos(&suite[0], 0, 0.05, 9, &spec()).is_err());
    }

    #[test]
    fn success_predicate() {
        let gt = ActionChunk::from_rows(&[vec![0.1, 0.2, 0.3, 0.0], vec![0.2, 0.3, 0.4, 1.0]]).unwrap();
        assert!(is_success(&gt, &gt, 0.1).unwrap());
        let mut rows = gt.to_rows();
        rows[1][2] += 0.2;
        assert!(!is_success(&ActionChunk::from_rows(&rows).unwrap(), &gt, 0.1).unwrap());
        let mut rows = gt.to_rows();
        rows[0][0] += 0.05;
        rows[0][3] = 1.0;
        assert!(!is_success(&ActionChunk::from_rows(&rows).unwrap(), &gt, 0.1).unwrap());
        let other = ActionChunk::from_rows(&[vec![0.1, 0.0]]).unwrap();
        assert!(is_success(&other, &gt, 0.1).is_err());
    }

    #[test]
    fn quantization_never_breaks_self_success() {
        let s = spec();
        let half_bin = (0..3).map(|j| s.bin_width(j) / 2.0).fold(0.0, f64::max);
        for task in make_task_suite(6, 5, &s).unwrap() {
            for demo in generate_demos(&task, 10, 0.05, 1, &s).unwrap() {
                let back = codec::decode(&codec::encode(&demo.chunk, &s).unwrap(), &s).unwrap();
                assert!(is_success(&back, &demo.chunk, half_bin + 1e-12).unwrap());
            }
        }
    }
}
