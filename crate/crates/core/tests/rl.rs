use std::sync::OnceLock;

use codemark::base_lm::{BaseLm, DEFAULT_LAMBDA, DEFAULT_ORDER};
use codemark::codec::{decide, step_base_logits, Composite, GateMode, Path, WatermarkConfig};
use codemark::corpus::{generate_tasks, Task, TemplatePool};
use codemark::policy::{context_window, Init, PolicyConfig, PolicyParams};
use codemark::rl::{
    clip_global_norm, grpo_loss, grpo_update, learning_rate, rollout_group, train, AdvantageTable, RlError,
    RolloutGroup, TrainConfig,
};

fn tasks() -> &'static (Vec<Task>, BaseLm) {
    static CELL: OnceLock<(Vec<Task>, BaseLm)> = OnceLock::new();
    CELL.get_or_init(|| {
        let tasks = generate_tasks(&TemplatePool::standard(), 400, 11).unwrap();
        let lm = BaseLm::fit(&tasks, DEFAULT_ORDER, DEFAULT_LAMBDA).unwrap();
        (tasks, lm)
    })
}

fn lm() -> &'static BaseLm {
    &tasks().1
}

fn policy(seed: u64) -> PolicyParams<f64> {
    let cfg = PolicyConfig { d_model: 16, heads: 2, ff: 32, layers: 1, ..PolicyConfig::desk() };
    PolicyParams::init(cfg, Init::Random, seed).unwrap()
}

fn group(p: &PolicyParams<f64>, wm: &WatermarkConfig, seed: u64) -> RolloutGroup {
    let cfg = TrainConfig::default();
    let seeds: Vec<u64> = (0..8).map(|i| seed * 100 + i).collect();
    rollout_group(lm(), p, &tasks().0[seed as usize], wm, &cfg, &seeds).unwrap()
}

#[test]
fn fresh_rollouts_have_unit_ratios_and_no_kl() {
    let p = policy(1);
    let wm = WatermarkConfig::default();
    let cfg = TrainConfig { beta: 0.5, ..Default::default() };
    let g = group(&p, &wm, 3);
    let adv = g.advantages(&cfg);
    let (stats, _) = grpo_loss(&p, &p, lm(), &g, &adv, &wm, &cfg).unwrap();
    let code: Vec<f64> = adv
        .masked
        .iter()
        .zip(&adv.is_code)
        .flat_map(|(a, m)| a.iter().zip(m).filter(|(_, &c)| c).map(|(&v, _)| v))
        .collect();
    let mean_adv = code.iter().sum::<f64>() / code.len() as f64;
    assert!((stats.mean_ratio - 1.0).abs() < 1e-12);
    assert!((stats.surrogate - mean_adv).abs() < 1e-12);
    assert!(stats.kl.abs() < 1e-12);
}

#[test]
fn zero_beta_leaves_kl_out_of_the_loss() {
    let p = policy(2);
    let reference = policy(9);
    let wm = WatermarkConfig::default();
    let g = group(&p, &wm, 4);
    let cfg = TrainConfig { beta: 0.0, ..Default::default() };
    let adv = g.advantages(&cfg);
    let (s0, _) = grpo_loss(&p, &reference, lm(), &g, &adv, &wm, &cfg).unwrap();
    assert_eq!(s0.kl, 0.0);
    assert_eq!(s0.loss, -s0.surrogate - cfg.entropy_coef * s0.gate_entropy);
    let with_kl = TrainConfig { beta: 1.0, ..cfg };
    let (s1, _) = grpo_loss(&p, &reference, lm(), &g, &adv, &wm, &with_kl).unwrap();
    assert!(s1.kl > 0.0);
    assert!((s1.loss - s0.loss - s1.kl).abs() < 1e-12);
}

/// Mean probability of each probe token under the smooth relaxation of the
/// current policy (the hard forward pass is piecewise constant in φ).
fn probe_probability(p: &PolicyParams<f64>, g: &RolloutGroup, wm: &WatermarkConfig, mask: &[Vec<bool>]) -> f64 {
    let (mut total, mut n) = (0.0, 0);
    for (r, rollout) in g.rollouts.iter().enumerate() {
        let rec = &rollout.record;
        let mut history = rec.prompt.clone();
        for (t, step) in rec.trace.iter().enumerate() {
            if mask[r][t] {
                let window = context_window(&rec.completion[..t], wm.context);
                let d = decide(p, &window, wm).unwrap();
                let base = step_base_logits::<f64>(lm(), &history, usize::MAX, wm);
                let c = Composite::new(&base, &d.gate, d.forced, &d.selection, wm.delta, 1.0, 1.0, Path::Relaxed);
                total += c.probs[step.token.index()];
                n += 1;
            }
            history.push(step.token);
        }
    }
    total / n as f64
}

#[test]
fn positive_advantage_on_green_tokens_raises_their_probability() {
    let mut p = policy(5);
    let wm = WatermarkConfig::default();
    let mut g = group(&p, &wm, 7);
    g.rollouts.extend(group(&p, &wm, 8).rollouts);
    let green: Vec<Vec<bool>> =
        g.rollouts.iter().map(|r| r.record.trace.iter().map(|s| s.gate && s.in_green).collect()).collect();
    assert!(green.iter().flatten().filter(|&&x| x).count() >= 5);
    let adv_rows: Vec<Vec<f64>> = green.iter().map(|m| m.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()).collect();
    let adv = AdvantageTable {
        a1: vec![0.0; green.len()],
        a2: adv_rows.clone(),
        total: adv_rows.clone(),
        masked: adv_rows,
        is_code: green.clone(),
    };
    // A wide clip range keeps every step on the unclipped branch.
    let cfg = TrainConfig { clip_eps: 1e9, entropy_coef: 0.0, ..Default::default() };
    let mut prev = probe_probability(&p, &g, &wm, &green);
    let start = prev;
    for _ in 0..50 {
        let (_, mut grads) = grpo_loss(&p, &p.clone(), lm(), &g, &adv, &wm, &cfg).unwrap();
        clip_global_norm(&mut grads, 1.0);
        p.add_scaled(&grads, -0.02);
        let now = probe_probability(&p, &g, &wm, &green);
        assert!(now > prev, "{now} after {prev}");
        prev = now;
    }
    assert!(prev > start);
}

#[test]
fn clipped_gradient_respects_the_bound() {
    let p = policy(3);
    let wm = WatermarkConfig::default();
    let g = group(&p, &wm, 5);
    let cfg = TrainConfig::default();
    let (_, mut grads) = grpo_loss(&p, &p, lm(), &g, &g.advantages(&cfg), &wm, &cfg).unwrap();
    grads.scale(1e4);
    for bound in [1e-3, 0.5, 1.0] {
        let mut c = grads.clone();
        let before = clip_global_norm(&mut c, bound);
        assert!(before > bound);
        assert!(c.l2_norm() <= bound + 1e-9);
    }
}

#[test]
fn non_finite_parameters_abort_without_update() {
    let good = policy(4);
    let wm = WatermarkConfig::default();
    let g = group(&good, &wm, 6);
    let mut bad = good.clone();
    let last = bad.tensors.len() - 1;
    bad.tensors[last].data[0] = f64::NAN;
    let before = bad.content_hash();
    let err = grpo_update(&mut bad, &good, lm(), &g, &wm, &TrainConfig::default(), 0.1);
    assert!(matches!(err, Err(RlError::NonFiniteLoss)));
    assert_eq!(bad.content_hash(), before);
}

#[test]
fn gate_forced_off_earns_no_watermark_reward() {
    let p = policy(6);
    let wm = WatermarkConfig { gate: GateMode::ForceOff, ..Default::default() };
    for seed in 0..4 {
        let g = group(&p, &wm, seed);
        for r in &g.rollouts {
            assert!(r.rewards.r3.iter().all(|&x| x == 0.0));
            assert_eq!(r.rewards.r2, 0.0);
        }
    }
}

#[test]
fn schedule_warms_up_then_decays_to_the_floor() {
    let lr = |s| learning_rate(s, 200, 0.1, 0.03, 0.1);
    assert!(lr(0) < lr(5));
    assert!((lr(6) - 0.1).abs() < 1e-12);
    assert!((0..199).skip(6).all(|s| lr(s + 1) <= lr(s) + 1e-15));
    assert!((lr(199) - 0.01).abs() < 1e-4);
}

#[test]
fn zero_steps_return_the_input_policy() {
    let (tasks, lm) = tasks();
    let mut p = policy(7);
    let before = p.clone();
    let cfg = TrainConfig { steps: 0, eval_tasks: 4, ..Default::default() };
    let rows = train(lm, &mut p, &tasks[..50], &tasks[50..60], &WatermarkConfig::default(), &cfg, |_| {}).unwrap();
    assert_eq!(p, before);
    assert_eq!(rows.len(), 1);
}

#[test]
fn training_is_deterministic_with_one_row_per_evaluation() {
    let (tasks, lm) = tasks();
    let cfg = TrainConfig { steps: 6, eval_interval: 2, eval_tasks: 4, group_size: 4, lr: 0.05, ..Default::default() };
    let run = || {
        let mut p = policy(8);
        let mut seen = 0;
        let rows = train(lm, &mut p, &tasks[..50], &tasks[50..60], &WatermarkConfig::default(), &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, rows.len());
        (p, rows)
    };
    let (p1, rows1) = run();
    let (p2, rows2) = run();
    assert_eq!(p1, p2);
    assert_eq!(rows1, rows2);
    let steps: Vec<usize> = rows1.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 2, 4, 6]);
    assert!(rows1[0].loss.is_none() && rows1[1].loss.is_some());
    assert_ne!(p1, policy(8));
}
