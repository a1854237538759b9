//! Detection quality (AUROC, TPR at a false-positive cap), functional quality
//! (pass@k), the variable-renaming attack, and end-to-end reports.

mod metrics;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base_lm::BaseLm;
use crate::codec::{detect, generate_watermarked, CodecError, GateMode, WatermarkConfig};
use crate::corpus::Task;
use crate::minilang::vocab::{identifiers, END};
use crate::minilang::{run_tests, TokenId, DEFAULT_FUEL};
use crate::policy::PolicyParams;
use crate::scalar::Scalar;

pub use metrics::{auroc, pass_at_k, tpr_at_fpr, Label, ScoreSample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores need at least one watermarked and one clean sample")]
    DegenerateLabels,
    #[error("{0}")]
    Domain(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("evaluation stopped after {} of {} tasks: {source}", .partial.tasks_completed, .partial.tasks)]
    Partial { partial: Box<EvalReport>, source: Box<EvalError> },
}

/// Renames identifiers through `perm`, where `perm[i]` replaces the `i`-th pool identifier.
pub fn rename_with(seq: &[TokenId], perm: &[TokenId; 8]) -> Vec<TokenId> {
    let pool = identifiers();
    seq.iter().map(|t| pool.iter().position(|p| p == t).map_or(*t, |i| perm[i])).collect()
}

/// Applies one random permutation of the identifier pool consistently.
pub fn rename_attack(seq: &[TokenId], seed: u64) -> Vec<TokenId> {
    let mut perm = identifiers();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rename_with(seq, &perm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    None,
    Rename,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Completions per task for pass@k.
    pub samples: usize,
    pub seed: u64,
    pub fpr_cap: f64,
    pub fuel: u64,
    pub watermark: WatermarkConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 10, seed: 0, fpr_cap: 0.05, fuel: DEFAULT_FUEL, watermark: WatermarkConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pass_at_1: f64,
    pub pass_at_10: Option<f64>,
    pub auroc: Option<f64>,
    pub tpr_at_5fpr: Option<f64>,
    pub mean_z_watermarked: f64,
    pub mean_z_clean: f64,
    pub attack: Attack,
    pub tasks: usize,
    pub tasks_completed: usize,
    pub watermarked_sequences: usize,
    pub clean_sequences: usize,
    pub partial: bool,
    pub policy_checkpoint_hash: String,
    pub base_lm_hash: String,
    pub config: EvalConfig,
}

/// The report and the per-sequence scores behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub samples: Vec<ScoreSample>,
}

fn task_seed(seed: u64, task: usize, draw: u64) -> u64 {
    seed ^ (task as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ draw.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per task: `samples` watermarked completions for pass@k, the first of them
/// (attacked if requested) as the positive, and one clean negative alternating
/// between an unwatermarked base-model completion and the corpus reference.
pub fn run_evaluation<S: Scalar>(
    lm: &BaseLm,
    params: &PolicyParams<S>,
    tasks: &[Task],
    cfg: &EvalConfig,
    attack: Attack,
) -> Result<Evaluation, EvalError> {
    if cfg.samples == 0 {
        return Err(EvalError::Domain("need at least one sample per task".into()));
    }
    let wm = &cfg.watermark;
    let clean_cfg = WatermarkConfig { delta: 0.0, gate: GateMode::ForceOff, ..wm.clone() };
    let step = |i: usize, task: &Task| -> Result<(f64, Option<f64>, ScoreSample, ScoreSample), EvalError> {
        let mut passed = 0;
        let mut first = None;
        for d in 0..cfg.samples {
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(cfg.seed, i, d as u64));
            let rec = generate_watermarked(lm, params, &task.prompt, wm, &mut rng)?;
            passed += run_tests(&rec.full_program(), &task.suite, cfg.fuel).passed as usize;
            first.get_or_insert(rec.completion);
        }
        let mut positive = first.expect("at least one sample");
        if attack == Attack::Rename {
            let full: Vec<TokenId> = task.prompt.iter().chain(&positive).copied().collect();
            positive = rename_attack(&full, task_seed(cfg.seed, i, u64::MAX))[task.prompt.len()..].to_vec();
        }
        let negative = if i % 2 == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(cfg.seed, i, u64::MAX - 1));
            generate_watermarked(lm, params, &task.prompt, &clean_cfg, &mut rng)?.completion
        } else {
            let mut r = task.reference.clone();
            r.push(END);
            r
        };
        let pos = ScoreSample::new(detect(params, &positive, wm)?.score, Label::Watermarked, format!("{}:wm", task.task_id));
        let neg = ScoreSample::new(detect(params, &negative, wm)?.score, Label::Clean, format!("{}:clean", task.task_id));
        let p1 = pass_at_k(cfg.samples, passed, 1)?;
        let p10 = if cfg.samples >= 10 { Some(pass_at_k(cfg.samples, passed, 10)?) } else { None };
        Ok((p1, p10, pos, neg))
    };
    let results: Vec<_> = tasks.par_iter().enumerate().map(|(i, task)| step(i, task)).collect();
    let mut samples = Vec::new();
    let mut pass1 = Vec::new();
    let mut pass10 = Vec::new();
    let mut failure = None;
    // The report covers the tasks before the first failure, in task order.
    for result in results {
        match result {
            Ok((p1, p10, pos, neg)) => {
                pass1.push(p1);
                pass10.extend(p10);
                samples.push(pos);
                samples.push(neg);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let of = |label: Label| samples.iter().filter(move |s| s.label == label).map(|s| s.z);
    let report = EvalReport {
        pass_at_1: mean(pass1.iter().copied()),
        pass_at_10: (!pass10.is_empty()).then(|| mean(pass10.iter().copied())),
        auroc: auroc(&samples).ok(),
        tpr_at_5fpr: tpr_at_fpr(&samples, cfg.fpr_cap).ok(),
        mean_z_watermarked: mean(of(Label::Watermarked)),
        mean_z_clean: mean(of(Label::Clean)),
        attack,
        tasks: tasks.len(),
        tasks_completed: pass1.len(),
        watermarked_sequences: of(Label::Watermarked).count(),
        clean_sequences: of(Label::Clean).count(),
        partial: failure.is_some(),
        policy_checkpoint_hash: params.content_hash(),
        base_lm_hash: lm.content_hash(),
        config: cfg.clone(),
    };
    match failure {
        Some(e) => Err(EvalError::Partial { partial: Box::new(report), source: Box::new(e) }),
        None => Ok(Evaluation { report, samples }),
    }
}

/// `id,label,z` rows for external plotting.
pub fn write_scores_csv<W: Write>(samples: &[ScoreSample], mut out: W) -> std::io::Result<()> {
    writeln!(out, "id,label,z")?;
    for s in samples {
        let label = match s.label {
            Label::Watermarked => "watermarked",
            Label::Clean => "clean",
        };
        writeln!(out, "{},{},{}", s.id, label, s.z)?;
    }
    Ok(())
}
