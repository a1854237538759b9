use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Watermarked,
    Clean,
}

/// A detection score with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub z: f64,
    pub label: Label,
    pub id: String,
}

impl ScoreSample {
    pub fn new(z: f64, label: Label, id: impl Into<String>) -> Self {
        Self { z, label, id: id.into() }
    }
}

fn split(samples: &[ScoreSample]) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let pos: Vec<f64> = samples.iter().filter(|s| s.label == Label::Watermarked).map(|s| s.z).collect();
    let neg: Vec<f64> = samples.iter().filter(|s| s.label == Label::Clean).map(|s| s.z).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::DegenerateLabels);
    }
    if pos.iter().chain(&neg).any(|z| !z.is_finite()) {
        return Err(EvalError::Domain("scores must be finite".into()));
    }
    Ok((pos, neg))
}

/// `P(z_pos > z_neg) + ½·P(z_pos = z_neg)` via midranks.
pub fn auroc(samples: &[ScoreSample]) -> Result<f64, EvalError> {
    let (pos, neg) = split(samples)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&z| (z, true)).chain(neg.iter().map(|&z| (z, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps midranks integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i+1+j)/2.
        let mid2 = (i + 1 + j) as u128;
        rank2_sum += mid2 * all[i..j].iter().filter(|x| x.1).count() as u128;
        i = j;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    let u2 = rank2_sum - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// True-positive rate at the smallest threshold whose false-positive rate is at
/// most `fpr_cap`. A sample is flagged when its z exceeds the threshold.
pub fn tpr_at_fpr(samples: &[ScoreSample], fpr_cap: f64) -> Result<f64, EvalError> {
    let (pos, neg) = split(samples)?;
    if !(0.0..=1.0).contains(&fpr_cap) {
        return Err(EvalError::Domain("fpr cap must lie in [0, 1]".into()));
    }
    let rate = |v: &[f64], thr: f64| v.iter().filter(|&&z| z > thr).count() as f64 / v.len() as f64;
    let mut candidates: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    candidates.push(f64::NEG_INFINITY);
    candidates.sort_by(f64::total_cmp);
    let thr = candidates.into_iter().find(|&t| rate(&neg, t) <= fpr_cap).expect("the largest score admits no false positives");
    Ok(rate(&pos, thr))
}

/// Unbiased pass@k from `c` passing out of `n` samples:
/// `1 − C(n−c, k)/C(n, k)` evaluated as a running product.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, EvalError> {
    if c > n || k == 0 || k > n {
        return Err(EvalError::Domain(format!("pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}
