use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use codemark::base_lm::BaseLm;
use codemark::codec::{detect, generate_watermarked, Verdict};
use codemark::corpus::{generate_tasks, load_tasks, save_tasks, Task, TemplatePool};
use codemark::eval::{run_evaluation, write_scores_csv, Attack, EvalConfig, EvalError};
use codemark::minilang::{detokenize, run_tests, tokenize, TokenId, Vocabulary};
use codemark::policy::{load_checkpoint, save_checkpoint, PolicyParams};
use codemark::rl::{build_sft_examples, median_entropy, sft_train, train, MetricsRow};
use codemark::Policy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{RunConfig, UsageError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    CorpusGen,
    FitLm,
    Sft,
    Train,
    Generate,
    Detect,
    Eval,
    AttackEval,
}

pub const COMMANDS: &[(Command, &str, &str)] = &[
    (Command::CorpusGen, "corpus-gen", "Generate a task corpus"),
    (Command::FitLm, "fit-lm", "Fit the n-gram base model on a corpus"),
    (Command::Sft, "sft", "Initialize a policy by supervised warm-up"),
    (Command::Train, "train", "Train a policy with GRPO"),
    (Command::Generate, "generate", "Generate watermarked completions for corpus prompts"),
    (Command::Detect, "detect", "Score one program for the watermark"),
    (Command::Eval, "eval", "Evaluate detection and pass@k"),
    (Command::AttackEval, "attack-eval", "Evaluate under the identifier-renaming attack"),
];

impl Command {
    pub fn from_name(name: &str) -> Option<Self> {
        COMMANDS.iter().find(|c| c.1 == name).map(|c| c.0)
    }

    pub fn name(self) -> &'static str {
        COMMANDS.iter().find(|c| c.0 == self).expect("listed").1
    }

    /// Config keys naming files this command reads and must find.
    fn required_inputs(self) -> &'static [&'static str] {
        match self {
            Command::CorpusGen => &[],
            Command::FitLm => &["corpus"],
            Command::Sft | Command::Train => &["corpus", "base_lm"],
            Command::Generate | Command::Eval | Command::AttackEval => &["corpus", "base_lm", "policy"],
            Command::Detect => &["policy", "input"],
        }
    }
}

fn input_path<'a>(cfg: &'a RunConfig, key: &str) -> Option<&'a PathBuf> {
    let p = &cfg.paths;
    match key {
        "corpus" => p.corpus.as_ref(),
        "base_lm" => p.base_lm.as_ref(),
        "policy" => p.policy.as_ref(),
        "input" => p.input.as_ref(),
        "init" => p.init.as_ref(),
        "eval_corpus" => p.eval_corpus.as_ref(),
        _ => None,
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Checks that every path the command needs is present and resolvable, and
/// fills in derived output paths. Runs before anything is written.
pub fn check_paths(cmd: Command, cfg: &mut RunConfig) -> Result<(), UsageError> {
    for key in cmd.required_inputs().iter().chain(&["init", "eval_corpus"]) {
        let required = cmd.required_inputs().contains(key);
        match input_path(cfg, key) {
            Some(p) if !p.is_file() => return Err(UsageError::new(*key, format!("no such file {}", p.display()))),
            None if required => return Err(UsageError::new(*key, format!("required by {}", cmd.name()))),
            _ => {}
        }
    }
    if cmd != Command::Detect && cfg.paths.out.is_none() {
        return Err(UsageError::new("out", format!("required by {}", cmd.name())));
    }
    if cmd == Command::Train && cfg.paths.metrics.is_none() {
        cfg.paths.metrics = cfg.paths.out.as_deref().map(|o| with_suffix(o, ".metrics.jsonl"));
    }
    if cfg.paths.metadata.is_none() {
        let anchor = cfg.paths.out.as_ref().or(cfg.paths.input.as_ref()).expect("checked above");
        cfg.paths.metadata = Some(with_suffix(anchor, ".meta.json"));
    }
    let p = &cfg.paths;
    let outputs = [("out", &p.out), ("metrics", &p.metrics), ("csv", &p.csv), ("text_dir", &p.text_dir), ("metadata", &p.metadata)];
    for (key, path) in outputs {
        if let Some(path) = path {
            let parent = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !parent.is_dir() {
                return Err(UsageError::new(key, format!("directory {} does not exist", parent.display())));
            }
        }
    }
    Ok(())
}

/// State of one invocation, persisted as the metadata file.
pub struct Run {
    pub command: Command,
    pub cfg: RunConfig,
    pub derived: BTreeMap<String, Value>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    version: &'static str,
    status: &'a str,
    error: Option<String>,
    config: &'a RunConfig,
    seeds: BTreeMap<&'static str, u64>,
    derived: &'a BTreeMap<String, Value>,
    outputs: &'a [PathBuf],
}

impl Run {
    pub fn new(command: Command, cfg: RunConfig) -> Self {
        Self { command, cfg, derived: BTreeMap::new(), outputs: Vec::new() }
    }

    fn note(&mut self, key: &str, v: impl Serialize) {
        self.derived.insert(key.to_string(), serde_json::to_value(v).expect("serializable"));
    }

    fn out(&self) -> &Path {
        self.cfg.paths.out.as_deref().expect("checked at start")
    }

    pub fn write_metadata(&self, error: Option<&anyhow::Error>) -> Result<()> {
        let seed = self.cfg.seed;
        let meta = Metadata {
            command: self.command.name(),
            version: env!("CARGO_PKG_VERSION"),
            status: if error.is_some() { "failed" } else { "ok" },
            error: error.map(|e| format!("{e:#}")),
            config: &self.cfg,
            seeds: [("global", seed), ("corpus", seed), ("init", seed), ("sft", self.cfg.sft.seed), ("train", self.cfg.train.seed), ("generation", seed), ("eval", seed)]
                .into_iter()
                .collect(),
            derived: &self.derived,
            outputs: &self.outputs,
        };
        let path = self.cfg.paths.metadata.as_ref().expect("resolved at start");
        write_json(path, &meta)
    }

    pub fn execute(&mut self) -> Result<()> {
        match self.command {
            Command::CorpusGen => self.corpus_gen(),
            Command::FitLm => self.fit_lm(),
            Command::Sft => self.sft(),
            Command::Train => self.train(),
            Command::Generate => self.generate(),
            Command::Detect => self.detect(),
            Command::Eval => self.eval(Attack::None),
            Command::AttackEval => self.eval(Attack::Rename),
        }
    }

    fn corpus(&self) -> Result<Vec<Task>> {
        let p = self.cfg.paths.corpus.as_ref().expect("checked at start");
        load_tasks(p).with_context(|| format!("reading corpus {}", p.display()))
    }

    fn base_lm(&mut self) -> Result<BaseLm> {
        let p = self.cfg.paths.base_lm.as_ref().expect("checked at start");
        let lm = BaseLm::load(p).with_context(|| format!("reading base model {}", p.display()))?;
        self.note("base_lm_hash", lm.content_hash());
        Ok(lm)
    }

    fn policy(&mut self) -> Result<Policy> {
        let p = self.cfg.paths.policy.as_ref().expect("checked at start");
        let params: Policy = load_checkpoint(p).with_context(|| format!("reading policy {}", p.display()))?;
        self.note("policy_hash", params.content_hash());
        self.note("policy_config", params.config);
        Ok(params)
    }

    /// The `init` checkpoint if given, otherwise a fresh network from the seed.
    fn initial_policy(&mut self) -> Result<Policy> {
        let params = match &self.cfg.paths.init {
            Some(p) => load_checkpoint(p).with_context(|| format!("reading init policy {}", p.display()))?,
            None => PolicyParams::init(self.cfg.policy, self.cfg.init_mode.into(), self.cfg.seed)?,
        };
        self.note("init_policy_hash", params.content_hash());
        self.note("policy_config", params.config);
        Ok(params)
    }

    fn save_policy(&mut self, params: &Policy) -> Result<()> {
        let out = self.out().to_path_buf();
        save_checkpoint(params, &out).with_context(|| format!("writing {}", out.display()))?;
        self.note("policy_hash", params.content_hash());
        self.outputs.push(out);
        Ok(())
    }

    fn corpus_gen(&mut self) -> Result<()> {
        let tasks = generate_tasks(&TemplatePool::standard(), self.cfg.count, self.cfg.seed)?;
        let out = self.out().to_path_buf();
        save_tasks(&out, &tasks).with_context(|| format!("writing {}", out.display()))?;
        self.note("tasks", tasks.len());
        self.outputs.push(out.clone());
        println!("wrote {} tasks to {}", tasks.len(), out.display());
        Ok(())
    }

    fn fit_lm(&mut self) -> Result<()> {
        let tasks = self.corpus()?;
        let lm = BaseLm::fit(&tasks, self.cfg.order, self.cfg.lambda)?;
        let out = self.out().to_path_buf();
        lm.save(&out).with_context(|| format!("writing {}", out.display()))?;
        self.note("base_lm_hash", lm.content_hash());
        self.note("training_tasks", tasks.len());
        self.outputs.push(out.clone());
        println!("fitted order-{} model on {} tasks, wrote {}", lm.order(), tasks.len(), out.display());
        Ok(())
    }

    fn sft(&mut self) -> Result<()> {
        let tasks = self.corpus()?;
        let lm = self.base_lm()?;
        let mut params = self.initial_policy()?;
        let used = &tasks[..self.cfg.sft_tasks.min(tasks.len())];
        let examples = build_sft_examples(&lm, used, params.config.context);
        let h = median_entropy(&examples);
        let losses = sft_train(&mut params, &examples, h, &self.cfg.sft)?;
        self.note("sft_tasks_used", used.len());
        self.note("sft_examples", examples.len());
        self.note("entropy_threshold", h);
        self.note("loss_first", losses.first());
        self.note("loss_last", losses.last());
        self.save_policy(&params)?;
        println!(
            "sft: {} examples, entropy threshold {h:.4}, loss {:.4} -> {:.4}",
            examples.len(),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        let corpus = self.corpus()?;
        let lm = self.base_lm()?;
        let mut params = self.initial_policy()?;
        let held_out_file = match &self.cfg.paths.eval_corpus {
            Some(p) => Some(load_tasks(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        // Without a separate file the tail of the corpus is held out.
        let (train_tasks, eval_tasks) = match &held_out_file {
            Some(e) => (&corpus[..], &e[..]),
            None => {
                let n = self.cfg.train.eval_tasks.min(corpus.len().saturating_sub(1));
                corpus.split_at(corpus.len() - n)
            }
        };
        self.note("train_tasks", train_tasks.len());
        self.note("eval_tasks", eval_tasks.len().min(self.cfg.train.eval_tasks));
        let wm = self.cfg.watermark_for(&params.config);
        let metrics_path = self.cfg.paths.metrics.clone().expect("resolved at start");
        let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
        self.outputs.push(metrics_path.clone());
        let mut io_error = None;
        let result = train(&lm, &mut params, train_tasks, eval_tasks, &wm, &self.cfg.train, |row: &MetricsRow| {
            let line = serde_json::to_string(row).expect("serializable");
            if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
                io_error.get_or_insert(e);
            }
        });
        if let Some(e) = io_error {
            return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
        }
        let rows = result?;
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            self.note("mean_z_eval_start", first.mean_z_eval);
            self.note("mean_z_eval_end", last.mean_z_eval);
            self.note("pass_rate_eval_start", first.pass_rate_eval);
            self.note("pass_rate_eval_end", last.pass_rate_eval);
            println!(
                "train: {} steps, held-out z {:.3} -> {:.3}, pass rate {:.3} -> {:.3}",
                self.cfg.train.steps, first.mean_z_eval, last.mean_z_eval, first.pass_rate_eval, last.pass_rate_eval
            );
        }
        self.save_policy(&params)
    }

    fn generate(&mut self) -> Result<()> {
        let tasks = self.corpus()?;
        let lm = self.base_lm()?;
        let params = self.policy()?;
        let wm = self.cfg.watermark_for(&params.config);
        let used = &tasks[..self.cfg.tasks.min(tasks.len())];
        let seed = self.cfg.seed;
        let fuel = self.cfg.train.fuel;
        let lines = used
            .par_iter()
            .enumerate()
            .map(|(i, task)| -> Result<(Value, String)> {
                let gen_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let rec = generate_watermarked(&lm, &params, &task.prompt, &wm, &mut ChaCha8Rng::seed_from_u64(gen_seed))?;
                let report = detect(&params, &rec.completion, &wm)?;
                let passed = run_tests(&rec.full_program(), &task.suite, fuel).passed;
                let text = detokenize(&rec.completion);
                let line = json!({
                    "task_id": task.task_id,
                    "template_id": task.template_id,
                    "seed": gen_seed,
                    "completion": text,
                    "tokens": rec.completion,
                    "T": report.t,
                    "N_G": report.n_g,
                    "z": report.score,
                    "verdict": report.verdict,
                    "passed": passed,
                });
                Ok((line, text))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.out().to_path_buf();
        let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
        for (line, _) in &lines {
            writeln!(w, "{}", serde_json::to_string(line)?)?;
        }
        w.flush()?;
        self.outputs.push(out.clone());
        if let Some(dir) = self.cfg.paths.text_dir.clone() {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (task, (_, text)) in used.iter().zip(&lines) {
                let p = dir.join(format!("{}.txt", task.task_id));
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
                self.outputs.push(p);
            }
        }
        let passed = lines.iter().filter(|(l, _)| l["passed"] == true).count();
        let mean_z = lines.iter().map(|(l, _)| l["z"].as_f64().unwrap_or(0.0)).sum::<f64>() / lines.len().max(1) as f64;
        self.note("completions", lines.len());
        self.note("passed", passed);
        self.note("mean_z", mean_z);
        println!("generated {} completions ({passed} pass), mean z {mean_z:.3}, wrote {}", lines.len(), out.display());
        Ok(())
    }

    fn detect(&mut self) -> Result<()> {
        let input = self.cfg.paths.input.clone().expect("checked at start");
        let tokens = read_program(&input)?;
        let params = self.policy()?;
        let wm = self.cfg.watermark_for(&params.config);
        let report = detect(&params, &tokens, &wm)?;
        self.note("tokens", tokens.len());
        self.note("T", report.t);
        self.note("N_G", report.n_g);
        self.note("z", report.z);
        self.note("verdict", report.verdict);
        if let Some(out) = self.cfg.paths.out.clone() {
            write_json(&out, &report)?;
            self.outputs.push(out);
        }
        match report.z {
            Some(z) => println!("z = {z:.4}"),
            None => println!("z = n/a (T below t_min = {})", wm.min_watermarked),
        }
        println!("T = {}", report.t);
        println!("N_G = {}", report.n_g);
        let verdict = match report.verdict {
            Verdict::Watermarked => "watermarked",
            Verdict::NotWatermarked => "not watermarked",
            Verdict::InsufficientData => "insufficient data",
        };
        println!("verdict = {verdict}");
        Ok(())
    }

    fn eval(&mut self, attack: Attack) -> Result<()> {
        let tasks = self.corpus()?;
        let lm = self.base_lm()?;
        let params = self.policy()?;
        let used = &tasks[..self.cfg.tasks.min(tasks.len())];
        let cfg = EvalConfig {
            samples: self.cfg.samples,
            seed: self.cfg.seed,
            fpr_cap: self.cfg.fpr_cap,
            fuel: self.cfg.train.fuel,
            watermark: self.cfg.watermark_for(&params.config),
        };
        let out = self.out().to_path_buf();
        let evaluation = match run_evaluation(&lm, &params, used, &cfg, attack) {
            Ok(e) => e,
            Err(EvalError::Partial { partial, source }) => {
                write_json(&out, &partial)?;
                self.outputs.push(out);
                bail!("evaluation incomplete, partial report written: {source}");
            }
            Err(e) => return Err(e.into()),
        };
        let r = &evaluation.report;
        write_json(&out, r)?;
        self.outputs.push(out.clone());
        if let Some(csv) = self.cfg.paths.csv.clone() {
            let f = BufWriter::new(File::create(&csv).with_context(|| format!("creating {}", csv.display()))?);
            write_scores_csv(&evaluation.samples, f)?;
            self.outputs.push(csv);
        }
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "{}: pass@1 {:.4}, pass@10 {}, AUROC {}, TPR@{}FPR {}, mean z {:.3} vs {:.3} clean",
            self.command.name(),
            r.pass_at_1,
            show(r.pass_at_10),
            show(r.auroc),
            self.cfg.fpr_cap,
            show(r.tpr_at_5fpr),
            r.mean_z_watermarked,
            r.mean_z_clean
        );
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Token-id files (`.ids`, `.tok`, `.tokens`: integers separated by whitespace
/// or commas; `.json`: an array) or MiniLang text for any other extension.
pub fn read_program(path: &Path) -> Result<Vec<TokenId>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let ids: Vec<u16> = match ext {
        "ids" | "tok" | "tokens" => text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u16>().with_context(|| format!("bad token id {s:?} in {}", path.display())))
            .collect::<Result<_>>()?,
        "json" => serde_json::from_str(&text).with_context(|| format!("{} is not a JSON id array", path.display()))?,
        _ => return Ok(tokenize(&text).with_context(|| format!("lexing {}", path.display()))?.ids),
    };
    let v = Vocabulary::standard().len();
    if let Some(bad) = ids.iter().find(|&&i| i as usize >= v) {
        bail!("token id {bad} is outside the vocabulary of {v}");
    }
    Ok(ids.into_iter().map(TokenId).collect())
}
