//! Watermarked generation over the frozen base model and key-holder detection
//! that replays the policy's decisions from the observed tokens alone.

mod composite;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_lm::{sample_from_probs, BaseLm};
use crate::minilang::vocab::{END, HASH, NEWLINE, PAD};
use crate::minilang::{TokenId, Vocabulary};
use crate::policy::{
    context_window, forward, gate_decision, gumbel_green_selection, GreenSelection, NoiseMode, PolicyConfig,
    PolicyError, PolicyOutput, PolicyParams, WGate,
};
use crate::scalar::Scalar;

pub use composite::{bias_logits, Composite, Path};

/// Logit used to remove a token from the sampling support.
const MASKED: f64 = -1e30;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid watermark configuration: {0}")]
    InvalidConfig(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("green hits {n_g} exceed watermarked positions {t}")]
    Domain { n_g: usize, t: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How the per-position gate is decided.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Policy,
    ForceOn,
    ForceOff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatermarkConfig {
    pub delta: f64,
    pub gamma: f64,
    pub context: usize,
    pub switch_threshold: f64,
    /// Detection threshold τ on z.
    pub z_threshold: f64,
    /// Fewest watermarked positions for a verdict (T_min).
    pub min_watermarked: usize,
    pub max_completion: usize,
    pub temperature: f64,
    pub relax_temperature: f64,
    pub noise: NoiseMode,
    pub gate: GateMode,
    /// END is unavailable until this many code tokens have been emitted.
    pub min_code_tokens: usize,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self {
            delta: 2.0,
            gamma: 0.5,
            context: 4,
            switch_threshold: 0.5,
            z_threshold: 4.0,
            min_watermarked: 10,
            max_completion: 256,
            temperature: 1.0,
            relax_temperature: 1.0,
            noise: NoiseMode::Keyed { key: 0x00c0_de5e_ed00 },
            gate: GateMode::Policy,
            min_code_tokens: 0,
        }
    }
}

impl WatermarkConfig {
    /// Defaults with γ, δ and c taken from a trained policy.
    pub fn for_policy(p: &PolicyConfig) -> Self {
        Self { delta: p.delta, gamma: p.gamma, context: p.context, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let problems = [
            (self.delta >= 0.0 && self.delta.is_finite(), "delta must be finite and >= 0"),
            (self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (self.context >= 1, "context must be >= 1"),
            (self.z_threshold > 0.0, "tau must be > 0"),
            (self.min_watermarked >= 1, "T_min must be >= 1"),
            (self.max_completion >= 1, "max completion must be >= 1"),
            (self.temperature > 0.0, "temperature must be > 0"),
            (self.relax_temperature > 0.0, "relaxation temperature must be > 0"),
            (self.min_code_tokens <= self.max_completion, "min code tokens exceeds the cap"),
        ];
        match problems.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(CodecError::InvalidConfig(msg.to_string())),
            None => Ok(()),
        }
    }
}

/// The discrete action at one position together with the values behind it.
#[derive(Clone, Debug)]
pub struct Decision<S> {
    pub output: PolicyOutput<S>,
    pub gate: WGate<S>,
    pub forced: bool,
    pub selection: GreenSelection<S>,
    pub noise_seed: Option<u64>,
}

/// Applies gating and green selection to a policy output for `window`.
pub fn decision_from_output<S: Scalar>(output: PolicyOutput<S>, window: &[TokenId], cfg: &WatermarkConfig) -> Decision<S> {
    let mut gate = gate_decision(output.w_phi, cfg.switch_threshold);
    let forced = match cfg.gate {
        GateMode::Policy => false,
        GateMode::ForceOn => {
            gate.hard = true;
            true
        }
        GateMode::ForceOff => {
            gate.hard = false;
            true
        }
    };
    let (u, noise_seed) = cfg.noise.draw(window, output.l_phi.len());
    let selection = gumbel_green_selection(&output.l_phi, cfg.gamma, &u);
    Decision { output, gate, forced, selection, noise_seed }
}

pub fn decide<S: Scalar>(params: &PolicyParams<S>, window: &[TokenId], cfg: &WatermarkConfig) -> Result<Decision<S>, CodecError> {
    Ok(decision_from_output(forward(params, window)?, window, cfg))
}

/// Base-model logits for the next completion token: PAD is never sampled and END
/// stays unavailable until `min_code_tokens` code tokens exist.
pub fn step_base_logits<S: Scalar>(lm: &BaseLm, history: &[TokenId], code_so_far: usize, cfg: &WatermarkConfig) -> Vec<S> {
    let mut l: Vec<S> = lm.next_logits::<S>(history).values;
    l[PAD.index()] = S::of(MASKED);
    if code_so_far < cfg.min_code_tokens {
        l[END.index()] = S::of(MASKED);
    }
    l
}

/// Tracks the sequence-level code mask one token at a time.
#[derive(Clone, Copy, Debug, Default)]
pub struct CodeTracker {
    in_comment: bool,
    pub code_tokens: usize,
}

impl CodeTracker {
    pub fn push(&mut self, t: TokenId) -> bool {
        if t == NEWLINE || t == END {
            self.in_comment = false;
        } else if t == HASH {
            self.in_comment = true;
        }
        let code = !self.in_comment && Vocabulary::standard().is_code(t);
        self.code_tokens += code as usize;
        code
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub token: TokenId,
    pub gate: bool,
    pub in_green: bool,
    /// Log-probability of `token` under the watermarked distribution.
    pub log_prob: f64,
    pub noise_seed: Option<u64>,
    pub is_code: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: Vec<TokenId>,
    pub completion: Vec<TokenId>,
    pub trace: Vec<TraceStep>,
}

impl GenerationRecord {
    pub fn full_program(&self) -> Vec<TokenId> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.completion);
        s
    }

    pub fn is_code(&self) -> Vec<bool> {
        self.trace.iter().map(|s| s.is_code).collect()
    }
}

/// Samples a completion token by token. The policy sees only completion tokens
/// (PAD before any exist), which is exactly what detection can reconstruct.
pub fn generate_watermarked<S: Scalar, R: Rng>(
    lm: &BaseLm,
    params: &PolicyParams<S>,
    prompt: &[TokenId],
    cfg: &WatermarkConfig,
    rng: &mut R,
) -> Result<GenerationRecord, CodecError> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(CodecError::EmptyPrompt);
    }
    let mut history = prompt.to_vec();
    let mut completion = Vec::new();
    let mut trace = Vec::new();
    let mut tracker = CodeTracker::default();
    while completion.len() < cfg.max_completion {
        let window = context_window(&completion, cfg.context);
        let d = decide(params, &window, cfg)?;
        let base = step_base_logits::<S>(lm, &history, tracker.code_tokens, cfg);
        let step = Composite::new(
            &base,
            &d.gate,
            d.forced,
            &d.selection,
            cfg.delta,
            cfg.temperature,
            cfg.relax_temperature,
            Path::StraightThrough,
        );
        let token = sample_from_probs(&step.probs, rng);
        let is_code = tracker.push(token);
        trace.push(TraceStep {
            token,
            gate: d.gate.hard,
            in_green: d.selection.contains(token),
            log_prob: step.log_probs[token.index()].to_f64_lossless(),
            noise_seed: d.noise_seed,
            is_code,
        });
        completion.push(token);
        history.push(token);
        if token == END {
            break;
        }
    }
    Ok(GenerationRecord { prompt: prompt.to_vec(), completion, trace })
}

/// Reconstructed action at one position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionDecision {
    pub t: usize,
    pub w: bool,
    #[serde(rename = "in_G")]
    pub in_green: bool,
}

/// Recomputes `(w, s_t ∈ G)` at every position from `s[t−c..t]` alone.
pub fn reconstruct_decisions<S: Scalar>(
    params: &PolicyParams<S>,
    s: &[TokenId],
    cfg: &WatermarkConfig,
) -> Result<Vec<PositionDecision>, CodecError> {
    cfg.validate()?;
    (0..s.len())
        .map(|t| {
            let window = context_window(&s[..t], cfg.context);
            let d = decide(params, &window, cfg)?;
            Ok(PositionDecision { t, w: d.gate.hard, in_green: d.selection.contains(s[t]) })
        })
        .collect()
}

/// One-proportion z statistic `(N_G − Tγ) / √(Tγ(1−γ))`.
pub fn z_score(n_g: usize, t: usize, gamma: f64) -> Result<f64, CodecError> {
    if n_g > t {
        return Err(CodecError::Domain { n_g, t });
    }
    if t == 0 || !(gamma > 0.0 && gamma < 1.0) {
        return Err(CodecError::InvalidConfig("z needs T >= 1 and gamma in (0, 1)".into()));
    }
    let tf = t as f64;
    Ok((n_g as f64 - tf * gamma) / (tf * gamma * (1.0 - gamma)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Watermarked,
    NotWatermarked,
    InsufficientData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N_G")]
    pub n_g: usize,
    /// Present only when `T ≥ T_min`.
    pub z: Option<f64>,
    /// z whenever `T ≥ 1`, else 0; the continuous score used for rankings.
    pub score: f64,
    pub verdict: Verdict,
    pub gamma: f64,
    pub tau: f64,
    pub policy_checkpoint_hash: String,
    pub per_position: Vec<PositionDecision>,
}

/// Scores a gate/membership trace. PAD positions are ignored.
pub fn score_decisions(decisions: &[PositionDecision], s: &[TokenId], cfg: &WatermarkConfig) -> (usize, usize, f64) {
    let (mut t, mut n_g) = (0, 0);
    for d in decisions {
        if d.w && s[d.t] != PAD {
            t += 1;
            n_g += d.in_green as usize;
        }
    }
    let score = if t == 0 { 0.0 } else { z_score(n_g, t, cfg.gamma).expect("n_g <= t") };
    (t, n_g, score)
}

pub fn detect<S: Scalar>(params: &PolicyParams<S>, s: &[TokenId], cfg: &WatermarkConfig) -> Result<DetectionReport, CodecError> {
    let per_position = reconstruct_decisions(params, s, cfg)?;
    let (t, n_g, score) = score_decisions(&per_position, s, cfg);
    let (z, verdict) = if t < cfg.min_watermarked {
        (None, Verdict::InsufficientData)
    } else if score > cfg.z_threshold {
        (Some(score), Verdict::Watermarked)
    } else {
        (Some(score), Verdict::NotWatermarked)
    };
    Ok(DetectionReport {
        t,
        n_g,
        z,
        score,
        verdict,
        gamma: cfg.gamma,
        tau: cfg.z_threshold,
        policy_checkpoint_hash: params.content_hash(),
        per_position,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_lm::{sample_token, DEFAULT_LAMBDA, DEFAULT_ORDER};
    use crate::corpus::{generate_tasks, TemplatePool};
    use crate::policy::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn lm() -> &'static BaseLm {
        static LM: OnceLock<BaseLm> = OnceLock::new();
        LM.get_or_init(|| {
            let tasks = generate_tasks(&TemplatePool::standard(), 600, 1).unwrap();
            BaseLm::fit(&tasks, DEFAULT_ORDER, DEFAULT_LAMBDA).unwrap()
        })
    }

    fn policy(seed: u64) -> PolicyParams<f64> {
        let cfg = PolicyConfig { d_model: 16, heads: 2, ff: 32, ..PolicyConfig::desk() };
        PolicyParams::init(cfg, Init::Random, seed).unwrap()
    }

    fn prompt() -> Vec<TokenId> {
        TemplatePool::standard().templates[0].prompt()
    }

    #[test]
    fn z_hand_values() {
        assert_eq!(z_score(50, 100, 0.5).unwrap(), 0.0);
        assert_eq!(z_score(75, 100, 0.5).unwrap(), 5.0);
        assert!((z_score(30, 40, 0.5).unwrap() - 3.1623).abs() < 1e-4);
        assert!(matches!(z_score(5, 4, 0.5), Err(CodecError::Domain { .. })));
    }

    #[test]
    fn z_is_strictly_increasing_in_hits() {
        for t in 1..60 {
            let zs: Vec<f64> = (0..=t).map(|n| z_score(n, t, 0.5).unwrap()).collect();
            assert!(zs.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn verdicts_follow_thresholds() {
        let cfg = WatermarkConfig::default();
        let s = vec![crate::minilang::vocab::RETURN; 100];
        let mk = |hits: usize| -> Vec<PositionDecision> {
            (0..100).map(|t| PositionDecision { t, w: true, in_green: t < hits }).collect()
        };
        let (t, n_g, z) = score_decisions(&mk(90), &s, &cfg);
        assert_eq!((t, n_g), (100, 90));
        assert!((z - 8.0).abs() < 1e-12);
        assert!(z > cfg.z_threshold);
        let (_, _, z) = score_decisions(&mk(70), &s, &cfg);
        assert_eq!(z, 4.0);
        let p = policy(1);
        let empty = detect(&p, &[], &cfg).unwrap();
        assert_eq!(empty.verdict, Verdict::InsufficientData);
        let pads = detect(&p, &[PAD; 30], &cfg).unwrap();
        assert_eq!((pads.t, pads.verdict), (0, Verdict::InsufficientData));
    }

    #[test]
    fn generation_is_deterministic_and_reconstructs_exactly() {
        let p = policy(2);
        let cfg = WatermarkConfig { min_code_tokens: 40, ..Default::default() };
        for seed in 0..10 {
            let a = generate_watermarked(lm(), &p, &prompt(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = generate_watermarked(lm(), &p, &prompt(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
            assert_eq!(a.trace.len(), a.completion.len());
            assert!(a.trace.iter().all(|s| s.log_prob <= 0.0 && s.log_prob.is_finite()));
            let rec = reconstruct_decisions(&p, &a.completion, &cfg).unwrap();
            for (r, s) in rec.iter().zip(&a.trace) {
                assert_eq!((r.w, r.in_green), (s.gate, s.in_green));
            }
            assert!(a.completion.iter().all(|&t| t != PAD));
            assert!(a.is_code().iter().filter(|&&c| c).count() >= 40 || a.completion.len() == cfg.max_completion);
        }
    }

    #[test]
    fn flipping_a_token_changes_reconstruction_only_locally() {
        let p = policy(3);
        let cfg = WatermarkConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<TokenId> = (0..30).map(|_| TokenId(rng.random_range(1..47))).collect();
        let base = reconstruct_decisions(&p, &s, &cfg).unwrap();
        let mut flipped = s.clone();
        flipped[10] = TokenId(if s[10].0 == 5 { 6 } else { 5 });
        let after = reconstruct_decisions(&p, &flipped, &cfg).unwrap();
        for t in 0..30 {
            if !(10..=10 + cfg.context).contains(&t) {
                assert_eq!(base[t], after[t]);
            }
        }
        let short = reconstruct_decisions(&p, &s[..2], &cfg).unwrap();
        assert_eq!(short.len(), 2);
    }

    #[test]
    fn zero_delta_matches_base_sampling() {
        let p = policy(5);
        let cfg = WatermarkConfig { delta: 0.0, ..Default::default() };
        let prompt = prompt();
        let window = context_window(&[], cfg.context);
        let d = decide(&p, &window, &cfg).unwrap();
        let base = step_base_logits::<f64>(lm(), &prompt, 0, &cfg);
        let step = Composite::new(&base, &d.gate, d.forced, &d.selection, 0.0, 1.0, 1.0, Path::StraightThrough);
        let direct = crate::scalar::softmax(&base);
        assert_eq!(step.probs, direct);
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            assert_eq!(sample_from_probs(&step.probs, &mut r1), sample_token(&base, 1.0, &mut r2));
        }
    }

    #[test]
    fn forced_strong_bias_pushes_tokens_green() {
        let p = policy(6);
        let cfg = WatermarkConfig { delta: 8.0, gate: GateMode::ForceOn, min_code_tokens: 30, ..Default::default() };
        let mut green = 0;
        let mut total = 0;
        for seed in 0..50 {
            let r = generate_watermarked(lm(), &p, &prompt(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for s in r.trace.iter().filter(|s| s.is_code) {
                green += s.in_green as usize;
                total += 1;
            }
        }
        assert!(green as f64 / total as f64 > 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(WatermarkConfig::default().validate().is_ok());
        assert!(WatermarkConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(WatermarkConfig { min_watermarked: 0, ..Default::default() }.validate().is_err());
        let r = generate_watermarked(lm(), &policy(1), &[], &WatermarkConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(CodecError::EmptyPrompt)));
    }
}
