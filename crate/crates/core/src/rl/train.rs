use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grpo::{grpo_update, learning_rate, Rollout, RolloutGroup};
use super::rewards::score_rollout;
use super::{RlError, TrainConfig};
use crate::base_lm::BaseLm;
use crate::codec::{generate_watermarked, WatermarkConfig};
use crate::corpus::Task;
use crate::policy::PolicyParams;
use crate::scalar::Scalar;

/// One metrics-log line. Training columns average the steps since the previous
/// line and are absent on the line written before the first step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_r1: Option<f64>,
    pub mean_r2: Option<f64>,
    pub mean_z_eval: f64,
    pub pass_rate_eval: f64,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub lr: f64,
}

/// Samples `n` completions of `task` with independent generators seeded from `seeds`.
pub fn rollout_group<S: Scalar>(
    lm: &BaseLm,
    params: &PolicyParams<S>,
    task: &Task,
    wm: &WatermarkConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<RolloutGroup, RlError> {
    let rollouts = seeds
        .par_iter()
        .map(|&s| {
            let record = generate_watermarked(lm, params, &task.prompt, wm, &mut ChaCha8Rng::seed_from_u64(s))?;
            let rewards = score_rollout(&record, &task.suite, wm.gamma, cfg.alpha, cfg.fuel);
            Ok(Rollout { record, rewards })
        })
        .collect::<Result<Vec<_>, RlError>>()?;
    Ok(RolloutGroup { rollouts })
}

/// Held-out mean z and pass rate of one completion per task. Generation seeds
/// depend only on the task index, so successive evaluations differ only
/// through the policy.
pub fn evaluate_policy<S: Scalar>(
    lm: &BaseLm,
    params: &PolicyParams<S>,
    tasks: &[Task],
    wm: &WatermarkConfig,
    cfg: &TrainConfig,
) -> Result<(f64, f64), RlError> {
    if tasks.is_empty() {
        return Ok((0.0, 0.0));
    }
    let scored = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let seed = cfg.seed ^ 0x5eed_e7a1 ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let record = generate_watermarked(lm, params, &task.prompt, wm, &mut ChaCha8Rng::seed_from_u64(seed))?;
            Ok(score_rollout(&record, &task.suite, wm.gamma, cfg.alpha, cfg.fuel))
        })
        .collect::<Result<Vec<_>, RlError>>()?;
    // Summed in task order so the result does not depend on the thread count.
    let (z, pass) = scored.iter().fold((0.0, 0.0), |(z, p), r| (z + r.z, p + r.r1));
    let n = tasks.len() as f64;
    Ok((z / n, pass / n))
}

#[derive(Default)]
struct Window {
    r1: f64,
    r2: f64,
    loss: f64,
    grad_norm: f64,
    steps: usize,
}

impl Window {
    fn mean(&self, v: f64) -> Option<f64> {
        (self.steps > 0).then(|| v / self.steps as f64)
    }
}

/// GRPO over `train_tasks`, evaluating on the first `cfg.eval_tasks` of
/// `eval_tasks` before the first step, every `cfg.eval_interval` steps and after
/// the last. `sink` sees each metrics row as soon as it exists.
pub fn train<S: Scalar>(
    lm: &BaseLm,
    params: &mut PolicyParams<S>,
    train_tasks: &[Task],
    eval_tasks: &[Task],
    wm: &WatermarkConfig,
    cfg: &TrainConfig,
    mut sink: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>, RlError> {
    cfg.validate()?;
    wm.validate()?;
    if train_tasks.is_empty() && cfg.steps > 0 {
        return Err(RlError::InvalidConfig("no training tasks".into()));
    }
    let held_out = &eval_tasks[..cfg.eval_tasks.min(eval_tasks.len())];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reference = params.clone();
    let mut rows = Vec::new();
    let mut window = Window::default();
    let mut emit = |step: usize, params: &PolicyParams<S>, window: &mut Window| -> Result<(), RlError> {
        let (z, pass) = evaluate_policy(lm, params, held_out, wm, cfg)?;
        let row = MetricsRow {
            step,
            mean_r1: window.mean(window.r1),
            mean_r2: window.mean(window.r2),
            mean_z_eval: z,
            pass_rate_eval: pass,
            loss: window.mean(window.loss),
            grad_norm: window.mean(window.grad_norm),
            lr: learning_rate(step.min(cfg.steps.saturating_sub(1)), cfg.steps.max(1), cfg.lr, cfg.warmup_ratio, cfg.min_lr_ratio),
        };
        sink(&row);
        rows.push(row);
        *window = Window::default();
        Ok(())
    };
    emit(0, params, &mut window)?;
    for step in 0..cfg.steps {
        if step > 0 && step % cfg.ref_refresh == 0 {
            reference = params.clone();
        }
        let task = &train_tasks[rng.random_range(0..train_tasks.len())];
        let seeds: Vec<u64> = (0..cfg.group_size).map(|_| rng.random()).collect();
        let group = rollout_group(lm, params, task, wm, cfg, &seeds)?;
        let lr = learning_rate(step, cfg.steps, cfg.lr, cfg.warmup_ratio, cfg.min_lr_ratio);
        let stats = grpo_update(params, &reference, lm, &group, wm, cfg, lr)?;
        let n = group.rollouts.len() as f64;
        window.r1 += group.rollouts.iter().map(|r| r.rewards.r1).sum::<f64>() / n;
        window.r2 += group.rollouts.iter().map(|r| r.rewards.r2).sum::<f64>() / n;
        window.loss += stats.loss;
        window.grad_norm += stats.grad_norm;
        window.steps += 1;
        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.steps {
            emit(done, params, &mut window)?;
        }
    }
    Ok(rows)
}
