use serde::{Deserialize, Serialize};

use super::advantages::AdvantageTable;
use super::rewards::RewardBundle;
use super::{clip_global_norm, RlError, TrainConfig};
use crate::base_lm::BaseLm;
use crate::codec::{
    decision_from_output, step_base_logits, CodeTracker, Composite, GenerationRecord, Path, WatermarkConfig,
};
use crate::policy::{backward, context_window, forward_cached, PolicyParams};
use crate::scalar::{sigmoid, Scalar};

/// One sampled completion and its rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub record: GenerationRecord,
    pub rewards: RewardBundle,
}

/// `N ≥ 2` completions of one prompt. Old log-probabilities live in the traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn advantages(&self, cfg: &TrainConfig) -> AdvantageTable {
        let rewards: Vec<(f64, f64)> = self.rollouts.iter().map(|r| (r.rewards.r1, r.rewards.r2)).collect();
        let r3: Vec<Vec<f64>> = self.rollouts.iter().map(|r| r.rewards.r3.clone()).collect();
        let code: Vec<Vec<bool>> = self.rollouts.iter().map(|r| r.record.is_code()).collect();
        AdvantageTable::build(&rewards, &r3, &code, cfg.w_exec, cfg.w_wm)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub gate_entropy: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub mean_ratio: f64,
    pub tokens: usize,
}

/// Loss and gradient of one group without touching the parameters.
pub fn grpo_loss<S: Scalar>(
    params: &PolicyParams<S>,
    reference: &PolicyParams<S>,
    lm: &BaseLm,
    group: &RolloutGroup,
    adv: &AdvantageTable,
    wm: &WatermarkConfig,
    cfg: &TrainConfig,
) -> Result<(UpdateStats, PolicyParams<S>), RlError> {
    if group.rollouts.len() < 2 {
        return Err(RlError::GroupTooSmall(group.rollouts.len()));
    }
    let tokens: usize = adv.is_code.iter().map(|m| m.iter().filter(|&&c| c).count()).sum();
    let mut grads = params.zeros_like();
    let mut stats = UpdateStats { tokens, ..Default::default() };
    if tokens == 0 {
        return Ok((stats, grads));
    }
    let inv_n = S::one() / S::of_usize(tokens);
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    for (r, rollout) in group.rollouts.iter().enumerate() {
        let rec = &rollout.record;
        let mut history = rec.prompt.clone();
        let mut tracker = CodeTracker::default();
        for (t, step) in rec.trace.iter().enumerate() {
            let code_before = tracker.code_tokens;
            tracker.push(step.token);
            if adv.is_code[r][t] {
                let window = context_window(&rec.completion[..t], wm.context);
                let base = step_base_logits::<S>(lm, &history, code_before, wm);
                let (out, cache) = forward_cached(params, &window)?;
                let w_phi = out.w_phi;
                let d = decision_from_output(out, &window, wm);
                let comp = composite(&base, &d, wm);
                let tok = step.token.index();
                let lp = comp.log_probs[tok].to_f64_lossless();
                let ratio = (lp - step.log_prob).exp();
                let a = adv.masked[r][t];
                let unclipped = ratio * a;
                let clipped = ratio.clamp(lo, hi) * a;
                stats.surrogate += unclipped.min(clipped);
                stats.mean_ratio += ratio;
                let mut d_biased = vec![S::zero(); base.len()];
                if unclipped <= clipped && a != 0.0 {
                    let c = S::of(-ratio * a) * inv_n;
                    for (g, v) in d_biased.iter_mut().zip(comp.d_logp_d_biased(tok)) {
                        *g += c * v;
                    }
                }
                if cfg.beta > 0.0 {
                    let rd = decision_from_output(crate::policy::forward(reference, &window)?, &window, wm);
                    let (kl, g) = comp.kl_to(&composite(&base, &rd, wm).log_probs);
                    stats.kl += kl.to_f64_lossless();
                    let c = S::of(cfg.beta) * inv_n;
                    for (acc, v) in d_biased.iter_mut().zip(g) {
                        *acc += c * v;
                    }
                }
                let (mut d_w, d_l) = comp.pull_back(&d_biased);
                let p = sigmoid(w_phi);
                let q = S::one() - p;
                let h = -(xlogx(p) + xlogx(q));
                stats.gate_entropy += h.to_f64_lossless();
                // d(−H)/dw_φ = w_φ·p·(1−p)
                d_w += S::of(cfg.entropy_coef) * inv_n * w_phi * p * q;
                backward(params, &cache, d_w, &d_l, &mut grads);
            }
            history.push(step.token);
        }
    }
    let n = tokens as f64;
    stats.surrogate /= n;
    stats.kl /= n;
    stats.gate_entropy /= n;
    stats.mean_ratio /= n;
    stats.loss = -stats.surrogate - cfg.entropy_coef * stats.gate_entropy;
    if cfg.beta > 0.0 {
        stats.loss += cfg.beta * stats.kl;
    }
    if !stats.loss.is_finite() || !grads.is_finite() {
        return Err(RlError::NonFiniteLoss);
    }
    stats.grad_norm = grads.l2_norm().to_f64_lossless();
    Ok((stats, grads))
}

fn xlogx<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x * x.ln()
    } else {
        S::zero()
    }
}

fn composite<S: Scalar>(base: &[S], d: &crate::codec::Decision<S>, wm: &WatermarkConfig) -> Composite<S> {
    Composite::new(
        base,
        &d.gate,
        d.forced,
        &d.selection,
        wm.delta,
        wm.temperature,
        wm.relax_temperature,
        Path::StraightThrough,
    )
}

/// One clipped-surrogate step with global-norm gradient clipping. On a
/// non-finite loss the parameters are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn grpo_update<S: Scalar>(
    params: &mut PolicyParams<S>,
    reference: &PolicyParams<S>,
    lm: &BaseLm,
    group: &RolloutGroup,
    wm: &WatermarkConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<UpdateStats, RlError> {
    let adv = group.advantages(cfg);
    let (stats, mut grads) = grpo_loss(params, reference, lm, group, &adv, wm, cfg)?;
    clip_global_norm(&mut grads, cfg.grad_clip);
    params.add_scaled(&grads, S::of(-lr));
    Ok(stats)
}

/// Linear warmup, then cosine decay from `peak` to `floor · peak`.
pub fn learning_rate(step: usize, total: usize, peak: f64, warmup_ratio: f64, floor: f64) -> f64 {
    let warm = (warmup_ratio * total as f64).ceil() as usize;
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    peak * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
