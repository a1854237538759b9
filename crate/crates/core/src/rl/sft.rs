//! Supervised warm start: the gate learns to fire where the base model is
//! uncertain and the selection logits learn the base model's next-token
//! distribution, both from clean reference code.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_global_norm, RlError};
use crate::base_lm::BaseLm;
use crate::codec::{step_base_logits, WatermarkConfig};
use crate::corpus::Task;
use crate::minilang::vocab::END;
use crate::minilang::TokenId;
use crate::policy::{backward, context_window, forward_cached, PolicyParams};
use crate::scalar::{log_softmax, sigmoid, softmax, Scalar};

/// One supervised position: the policy's view and the base model's answer.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub window: Vec<TokenId>,
    pub target: Vec<f64>,
    pub entropy: f64,
}

/// Every completion position of every reference (including the final END).
pub fn build_sft_examples(lm: &BaseLm, tasks: &[Task], context: usize) -> Vec<SftExample> {
    let cfg = WatermarkConfig::default();
    let mut out = Vec::new();
    for task in tasks {
        let mut completion = task.reference.clone();
        completion.push(END);
        let mut history = task.prompt.clone();
        for t in 0..completion.len() {
            let target = softmax(&step_base_logits::<f64>(lm, &history, 0, &cfg));
            let entropy = -target.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            out.push(SftExample { window: context_window(&completion[..t], context), target, entropy });
            history.push(completion[t]);
        }
    }
    out
}

/// Median of the examples' base-model entropies (mean of the middle pair for
/// even counts).
pub fn median_entropy(examples: &[SftExample]) -> f64 {
    assert!(!examples.is_empty(), "median of nothing");
    let mut h: Vec<f64> = examples.iter().map(|e| e.entropy).collect();
    h.sort_by(f64::total_cmp);
    let n = h.len();
    if n % 2 == 1 {
        h[n / 2]
    } else {
        0.5 * (h[n / 2 - 1] + h[n / 2])
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

/// Mean over the batch of `BCE(σ(w_φ), 1[H > h]) + CE(base ‖ softmax(l_φ))`, and
/// its gradient.
pub fn sft_step<S: Scalar>(
    params: &PolicyParams<S>,
    batch: &[SftExample],
    h_threshold: f64,
) -> Result<(f64, PolicyParams<S>), RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let scale = S::one() / S::of_usize(batch.len());
    let mut grads = params.zeros_like();
    let mut loss = S::zero();
    for ex in batch {
        let (out, cache) = forward_cached(params, &ex.window)?;
        let y = if ex.entropy > h_threshold { S::one() } else { S::zero() };
        loss += softplus(out.w_phi) - y * out.w_phi;
        let d_w = (sigmoid(out.w_phi) - y) * scale;
        let logq = log_softmax(&out.l_phi);
        let mut d_l = Vec::with_capacity(logq.len());
        for (&lq, &p) in logq.iter().zip(&ex.target) {
            let p = S::of(p);
            if p > S::zero() {
                loss -= p * lq;
            }
            d_l.push((lq.exp() - p) * scale);
        }
        backward(params, &cache, d_w, &d_l, &mut grads);
    }
    let loss = (loss * scale).to_f64_lossless();
    if !loss.is_finite() || !grads.is_finite() {
        return Err(RlError::NonFiniteLoss);
    }
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.1, batch_size: 32, grad_clip: 1.0, seed: 0 }
    }
}

/// Minibatch SGD over shuffled examples. Returns the loss of every step.
pub fn sft_train<S: Scalar>(
    params: &mut PolicyParams<S>,
    examples: &[SftExample],
    h_threshold: f64,
    cfg: &SftConfig,
) -> Result<Vec<f64>, RlError> {
    if examples.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, mut grads) = sft_step(params, &batch, h_threshold)?;
        clip_global_norm(&mut grads, cfg.grad_clip);
        params.add_scaled(&grads, S::of(-cfg.lr));
        losses.push(loss);
    }
    Ok(losses)
}
