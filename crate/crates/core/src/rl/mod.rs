//! Reinforcement learning of the watermark policy against a frozen base model:
//! execution, detection and per-token rewards, group-relative advantages masked
//! to code tokens, a supervised warm start, and clipped-surrogate updates.

pub mod advantages;
mod grpo;
pub mod rewards;
mod sft;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecError;
use crate::minilang::DEFAULT_FUEL;
use crate::policy::{PolicyError, PolicyParams};
use crate::scalar::Scalar;

pub use advantages::{combine_and_mask, outcome_advantages, process_advantages, AdvantageTable};
pub use grpo::{grpo_loss, grpo_update, learning_rate, Rollout, RolloutGroup, UpdateStats};
pub use rewards::{detect_reward, exec_reward, score_rollout, token_reward, trace_z, RewardBundle};
pub use sft::{build_sft_examples, median_entropy, sft_step, sft_train, SftConfig, SftExample};
pub use train::{evaluate_policy, rollout_group, train, MetricsRow};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("loss or gradient is not finite; step skipped")]
    NonFiniteLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("a group needs at least two completions, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Floor of the cosine schedule as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub group_size: usize,
    pub clip_eps: f64,
    /// KL weight β.
    pub beta: f64,
    /// Weight of the gate-entropy regularizer.
    pub entropy_coef: f64,
    /// Penalty for a gated red token.
    pub alpha: f64,
    pub grad_clip: f64,
    pub w_exec: f64,
    pub w_wm: f64,
    pub seed: u64,
    pub ref_refresh: usize,
    pub eval_interval: usize,
    /// How many held-out tasks each evaluation uses.
    pub eval_tasks: usize,
    pub fuel: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            min_lr_ratio: 0.1,
            warmup_ratio: 0.03,
            steps: 200,
            group_size: 8,
            clip_eps: 0.2,
            beta: 0.0,
            entropy_coef: 0.01,
            alpha: 3.0,
            grad_clip: 1.0,
            w_exec: 1.0,
            w_wm: 1.0,
            seed: 0,
            ref_refresh: 50,
            eval_interval: 50,
            eval_tasks: 64,
            fuel: DEFAULT_FUEL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let problems = [
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be > 0"),
            ((0.0..=1.0).contains(&self.min_lr_ratio), "min lr ratio must lie in [0, 1]"),
            ((0.0..1.0).contains(&self.warmup_ratio), "warmup ratio must lie in [0, 1)"),
            (self.group_size >= 2, "group size must be >= 2"),
            (self.clip_eps > 0.0, "clip epsilon must be > 0"),
            (self.beta >= 0.0, "beta must be >= 0"),
            (self.entropy_coef >= 0.0, "entropy weight must be >= 0"),
            (self.alpha >= 1.0, "alpha must be >= 1"),
            (self.grad_clip > 0.0, "gradient clip must be > 0"),
            (self.w_exec >= 0.0 && self.w_wm >= 0.0, "outcome weights must be >= 0"),
            (self.ref_refresh >= 1, "reference refresh interval must be >= 1"),
            (self.eval_interval >= 1, "eval interval must be >= 1"),
            (self.fuel >= 1, "fuel must be >= 1"),
        ];
        match problems.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(RlError::InvalidConfig(msg.to_string())),
            None => Ok(()),
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut PolicyParams<S>, max_norm: f64) -> f64 {
    let norm = grads.l2_norm().to_f64_lossless();
    if norm > max_norm {
        grads.scale(S::of(max_norm / norm));
    }
    norm
}
