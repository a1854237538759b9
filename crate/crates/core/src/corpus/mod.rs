//! Grammar-driven task corpus: prompts, reference bodies and derived test suites.

mod io;
pub mod templates;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minilang::{execute, parse_program, Program, TestCase, TestSuite, TokenId, DEFAULT_FUEL};

pub use io::{load_tasks, read_tasks, save_tasks, write_tasks, FormatError};
pub use templates::{Choices, Rendered, Template, TemplatePool};

/// Default number of test cases per task.
pub const DEFAULT_CASES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u64,
    pub template_id: String,
    #[serde(rename = "prompt_ids")]
    pub prompt: Vec<TokenId>,
    #[serde(rename = "reference_ids")]
    pub reference: Vec<TokenId>,
    #[serde(rename = "tests")]
    pub suite: TestSuite,
}

impl Task {
    /// Prompt followed by reference body.
    pub fn full_reference(&self) -> Vec<TokenId> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.reference);
        seq
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("template produced no valid test case in {0} draws")]
    DegenerateTemplate(usize),
    #[error("template pool is empty")]
    EmptyPool,
}

const DRAWS_PER_CASE: usize = 100;

/// Builds a suite by running `reference` on random arguments in [-9, 9], skipping
/// argument tuples whose execution fails.
pub fn derive_tests(reference: &Program, n_cases: usize, seed: u64) -> Result<TestSuite, CorpusError> {
    assert!(n_cases >= 1, "n_cases must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(n_cases);
    for _ in 0..n_cases {
        let case = (0..DRAWS_PER_CASE).find_map(|_| {
            let args: Vec<i64> = (0..reference.arity()).map(|_| rng.random_range(-9..=9)).collect();
            execute(reference, &args, DEFAULT_FUEL).value().map(|expected| TestCase { args, expected })
        });
        cases.push(case.ok_or(CorpusError::DegenerateTemplate(DRAWS_PER_CASE))?);
    }
    Ok(TestSuite { cases })
}

/// Draws one task: template uniformly, then a random surface variant and its suite.
pub fn sample_task(pool: &TemplatePool, seed: u64) -> Result<Task, CorpusError> {
    sample_task_marked(pool, seed).map(|(task, _)| task)
}

/// Like [`sample_task`], also returning the reference positions whose identifier
/// was a free surface choice.
pub fn sample_task_marked(pool: &TemplatePool, seed: u64) -> Result<(Task, Vec<usize>), CorpusError> {
    if pool.is_empty() {
        return Err(CorpusError::EmptyPool);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = &pool.templates[rng.random_range(0..pool.len())];
    let Rendered { ids: reference, choice_positions } = template.render_marked(&mut Choices::random(&mut rng));
    let prompt = template.prompt();
    let mut full = prompt.clone();
    full.extend_from_slice(&reference);
    let program = parse_program(&full).expect("templates render valid programs");
    let suite = derive_tests(&program, DEFAULT_CASES, rng.random())?;
    let task = Task { task_id: seed, template_id: template.id.to_string(), prompt, reference, suite };
    Ok((task, choice_positions))
}

/// `count` tasks with seeds derived from `base_seed`; task ids are the per-task seeds.
pub fn generate_tasks(pool: &TemplatePool, count: usize, base_seed: u64) -> Result<Vec<Task>, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    (0..count).map(|_| sample_task(pool, rng.random())).collect()
}
