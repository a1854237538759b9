use serde::{Deserialize, Serialize};

use crate::codec::{z_score, GenerationRecord};
use crate::minilang::{run_tests, TestReport, TestSuite};

/// Execution, detection and per-token watermark rewards for one completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub r1: f64,
    pub r2: f64,
    /// The z the detection reward was computed from.
    pub z: f64,
    pub r3: Vec<f64>,
}

/// 1 when every test case passed.
pub fn exec_reward(report: &TestReport) -> f64 {
    if report.passed {
        1.0
    } else {
        0.0
    }
}

/// Piecewise-linear detection reward, saturating at z = 3.
pub fn detect_reward(z: f64) -> f64 {
    if z >= 3.0 {
        1.0
    } else if z > 0.0 {
        z / 3.0
    } else {
        0.0
    }
}

/// +1 for a gated green token, −α for a gated red one, 0 when ungated.
pub fn token_reward(gated: bool, in_green: bool, alpha: f64) -> f64 {
    match (gated, in_green) {
        (false, _) => 0.0,
        (true, true) => 1.0,
        (true, false) => -alpha,
    }
}

/// z of a completion computed from its generation trace, 0 when nothing was gated.
/// Equal to detection's score on the unmodified completion.
pub fn trace_z(record: &GenerationRecord, gamma: f64) -> f64 {
    let t = record.trace.iter().filter(|s| s.gate).count();
    let n_g = record.trace.iter().filter(|s| s.gate && s.in_green).count();
    if t == 0 {
        0.0
    } else {
        z_score(n_g, t, gamma).expect("hits never exceed gated positions")
    }
}

pub fn score_rollout(record: &GenerationRecord, suite: &TestSuite, gamma: f64, alpha: f64, fuel: u64) -> RewardBundle {
    let r1 = exec_reward(&run_tests(&record.full_program(), suite, fuel));
    let z = trace_z(record, gamma);
    let r3 = record.trace.iter().map(|s| token_reward(s.gate, s.in_green, alpha)).collect();
    RewardBundle { r1, r2: detect_reward(z), z, r3 }
}
