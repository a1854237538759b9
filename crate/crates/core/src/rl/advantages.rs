//! Group-relative advantages. Outcome advantages compare whole completions of one
//! prompt; process advantages compare individual code tokens across the group.

use serde::{Deserialize, Serialize};

/// Added to a standard deviation before dividing.
pub const STD_EPS: f64 = 1e-8;

fn normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / (std + STD_EPS)).collect()
}

/// `A1_i` from `R_i = w_exec·r1_i + w_wm·r2_i`, normalized by the group's
/// population statistics. A zero-variance group gets all zeros.
pub fn outcome_advantages(rewards: &[(f64, f64)], w_exec: f64, w_wm: f64) -> Vec<f64> {
    assert!(rewards.len() >= 2, "a group needs at least two completions");
    let totals: Vec<f64> = rewards.iter().map(|&(r1, r2)| w_exec * r1 + w_wm * r2).collect();
    normalize(&totals)
}

/// `A2` per token, normalized over the code tokens of every completion in the
/// group. Non-code tokens take no part in the statistics and get 0.
pub fn process_advantages(r3: &[Vec<f64>], is_code: &[Vec<bool>]) -> Vec<Vec<f64>> {
    assert_eq!(r3.len(), is_code.len(), "one code mask per completion");
    let code: Vec<f64> = r3
        .iter()
        .zip(is_code)
        .flat_map(|(r, m)| r.iter().zip(m).filter(|(_, &c)| c).map(|(&v, _)| v))
        .collect();
    let mut normalized = if code.is_empty() { Vec::new() } else { normalize(&code) }.into_iter();
    r3.iter()
        .zip(is_code)
        .map(|(r, m)| {
            assert_eq!(r.len(), m.len(), "reward and mask lengths differ");
            m.iter().map(|&c| if c { normalized.next().expect("one value per code token") } else { 0.0 }).collect()
        })
        .collect()
}

/// `Â_t = (A1 + A2_t)·1[is_code_t]`.
pub fn combine_and_mask(a1: f64, a2: &[f64], is_code: &[bool]) -> Vec<f64> {
    assert_eq!(a2.len(), is_code.len(), "advantage and mask lengths differ");
    a2.iter().zip(is_code).map(|(&a, &c)| if c { a1 + a } else { 0.0 }).collect()
}

/// Every advantage of a rollout group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub a1: Vec<f64>,
    pub a2: Vec<Vec<f64>>,
    pub total: Vec<Vec<f64>>,
    pub masked: Vec<Vec<f64>>,
    pub is_code: Vec<Vec<bool>>,
}

impl AdvantageTable {
    pub fn build(rewards: &[(f64, f64)], r3: &[Vec<f64>], is_code: &[Vec<bool>], w_exec: f64, w_wm: f64) -> Self {
        let a1 = outcome_advantages(rewards, w_exec, w_wm);
        let a2 = process_advantages(r3, is_code);
        let total = a1.iter().zip(&a2).map(|(&a, row)| row.iter().map(|&b| a + b).collect()).collect();
        let masked = a1.iter().zip(&a2).zip(is_code).map(|((&a, row), m)| combine_and_mask(a, row, m)).collect();
        Self { a1, a2, total, masked, is_code: is_code.to_vec() }
    }
}
