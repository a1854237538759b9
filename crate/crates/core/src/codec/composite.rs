//! The watermarked next-token distribution `softmax((l + w·δ·l_G) / T)` and its
//! derivatives with respect to the policy outputs.

use crate::policy::{membership_relaxation, GreenSelection, WGate};
use crate::scalar::{log_softmax, softmax, Scalar};

/// `l̃_j = l_j + w·δ·membership_j`.
pub fn bias_logits<S: Scalar>(l: &[S], w: S, membership: &[S], delta: f64) -> Vec<S> {
    assert_eq!(l.len(), membership.len(), "logit and membership lengths differ");
    let wd = w * S::of(delta);
    l.iter().zip(membership).map(|(&x, &m)| x + wd * m).collect()
}

/// Which values feed the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    /// Hard gate and hard membership forward, relaxed derivatives backward.
    StraightThrough,
    /// `σ(w_φ)` and `S(g)` forward; the exact derivative of that smooth function.
    Relaxed,
}

/// Forward values of one watermarked step plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct Composite<S> {
    pub log_probs: Vec<S>,
    pub probs: Vec<S>,
    w: S,
    dw_dwphi: S,
    membership: Vec<S>,
    dm_dlphi: Vec<S>,
    delta: S,
    inv_temp: S,
}

impl<S: Scalar> Composite<S> {
    /// `gate_forced` pins the gate at its hard value with no gradient path.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        base: &[S],
        gate: &WGate<S>,
        gate_forced: bool,
        selection: &GreenSelection<S>,
        delta: f64,
        temperature: f64,
        relax_temperature: f64,
        path: Path,
    ) -> Self {
        let (relaxed, dm_dlphi) = membership_relaxation(&selection.g, selection.threshold, relax_temperature);
        let (w, membership) = match path {
            Path::StraightThrough => (gate.value(), selection.indicator()),
            Path::Relaxed if gate_forced => (gate.value(), relaxed),
            Path::Relaxed => (gate.relaxed, relaxed),
        };
        let dw_dwphi = if gate_forced { S::zero() } else { gate.sensitivity() };
        let inv_temp = S::one() / S::of(temperature);
        let scaled: Vec<S> = bias_logits(base, w, &membership, delta).into_iter().map(|x| x * inv_temp).collect();
        let log_probs = log_softmax(&scaled);
        let probs = softmax(&scaled);
        Self { log_probs, probs, w, dw_dwphi, membership, dm_dlphi, delta: S::of(delta), inv_temp }
    }

    /// Chains a gradient with respect to the biased logits `l̃` back to `(w_φ, l_φ)`.
    pub fn pull_back(&self, d_biased: &[S]) -> (S, Vec<S>) {
        let mut d_w = S::zero();
        let mut d_l = Vec::with_capacity(d_biased.len());
        for ((&g, &m), &dm) in d_biased.iter().zip(&self.membership).zip(&self.dm_dlphi) {
            d_w += g * self.delta * m;
            d_l.push(g * self.w * self.delta * dm);
        }
        (d_w * self.dw_dwphi, d_l)
    }

    /// Gradient of `log p̃(token)` with respect to `l̃`.
    pub fn d_logp_d_biased(&self, token: usize) -> Vec<S> {
        self.probs
            .iter()
            .enumerate()
            .map(|(j, &p)| (if j == token { S::one() } else { S::zero() } - p) * self.inv_temp)
            .collect()
    }

    /// `∂ log p̃(token) / ∂(w_φ, l_φ)`.
    pub fn grad_logp(&self, token: usize) -> (S, Vec<S>) {
        self.pull_back(&self.d_logp_d_biased(token))
    }

    /// `KL(self ‖ reference)` over the full next-token distribution, and its
    /// gradient with respect to this step's `l̃`.
    pub fn kl_to(&self, reference_log_probs: &[S]) -> (S, Vec<S>) {
        let kl: S = self
            .probs
            .iter()
            .zip(&self.log_probs)
            .zip(reference_log_probs)
            .map(|((&p, &lp), &lq)| if p > S::zero() { p * (lp - lq) } else { S::zero() })
            .sum();
        let grad = self
            .probs
            .iter()
            .zip(&self.log_probs)
            .zip(reference_log_probs)
            .map(|((&p, &lp), &lq)| if p > S::zero() { p * (lp - lq - kl) * self.inv_temp } else { S::zero() })
            .collect();
        (kl, grad)
    }
}
