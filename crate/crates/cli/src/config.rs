//! Run configuration: every tunable has a key usable both as `key = value` in a
//! config file and as `--key value` on the command line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use codemark::base_lm::{DEFAULT_LAMBDA, DEFAULT_ORDER};
use codemark::codec::{GateMode, WatermarkConfig};
use codemark::policy::{Init, NoiseMode, PolicyConfig};
use codemark::rl::{SftConfig, TrainConfig};
use serde::Serialize;

/// A problem with the command line or config file, detected before any side effect.
#[derive(Debug)]
pub struct UsageError {
    /// Offending flag or key, when there is one.
    pub key: Option<String>,
    pub message: String,
}

impl UsageError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: Some(key.into()), message: message.into() }
    }
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "--{}: {}", k.replace('_', "-"), self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

pub struct Key {
    pub name: &'static str,
    pub value: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, value: &'static str, help: &'static str) -> Key {
    Key { name, value, help }
}

pub const KEYS: &[Key] = &[
    key("corpus", "PATH", "task corpus (JSONL)"),
    key("eval_corpus", "PATH", "held-out corpus for training evaluations"),
    key("base_lm", "PATH", "fitted n-gram model"),
    key("policy", "PATH", "policy checkpoint to use"),
    key("init", "PATH", "checkpoint to start sft/train from instead of a fresh init"),
    key("out", "PATH", "primary output artifact"),
    key("metrics", "PATH", "training metrics JSONL [default: <out>.metrics.jsonl]"),
    key("csv", "PATH", "per-sequence z scores as CSV (eval)"),
    key("input", "PATH", "program to score (.txt text, .ids/.tok token ids, .json id array)"),
    key("text_dir", "DIR", "also write each generated completion as <task_id>.txt here"),
    key("metadata", "PATH", "run metadata file [default: <out>.meta.json]"),
    key("seed", "INT", "global seed"),
    key("threads", "INT", "worker threads"),
    key("count", "INT", "tasks to generate (corpus-gen)"),
    key("tasks", "INT", "corpus tasks used by generate and eval"),
    key("order", "INT", "n-gram order"),
    key("lambda", "FLOAT", "add-lambda smoothing"),
    key("init_mode", "random|zero_output", "fresh policy initialization"),
    key("context", "INT", "policy context window c"),
    key("d_model", "INT", "policy width"),
    key("layers", "INT", "policy layers"),
    key("heads", "INT", "attention heads"),
    key("ff", "INT", "feed-forward width"),
    key("delta", "FLOAT", "green bias"),
    key("gamma", "FLOAT", "green-list ratio"),
    key("switch_threshold", "FLOAT", "gate threshold on sigmoid(w)"),
    key("tau", "FLOAT", "detection threshold on z"),
    key("t_min", "INT", "fewest watermarked positions for a verdict"),
    key("max_len", "INT", "completion length cap"),
    key("temperature", "FLOAT", "sampling temperature"),
    key("relax_temperature", "FLOAT", "membership relaxation temperature"),
    key("noise", "keyed|noiseless", "Gumbel noise source"),
    key("key", "INT", "watermark key (decimal or 0x hex)"),
    key("gate", "policy|force_on|force_off", "gate mode"),
    key("min_code_tokens", "INT", "END is masked until this many code tokens"),
    key("lr", "FLOAT", "GRPO peak learning rate"),
    key("min_lr_ratio", "FLOAT", "cosine floor as a fraction of the peak"),
    key("warmup_ratio", "FLOAT", "warmup fraction of the steps"),
    key("steps", "INT", "GRPO steps"),
    key("group_size", "INT", "completions per GRPO group"),
    key("clip_eps", "FLOAT", "ratio clip epsilon"),
    key("beta", "FLOAT", "KL weight"),
    key("entropy_coef", "FLOAT", "gate entropy weight"),
    key("alpha", "FLOAT", "red-token penalty"),
    key("grad_clip", "FLOAT", "GRPO gradient norm bound"),
    key("w_exec", "FLOAT", "execution reward weight"),
    key("w_wm", "FLOAT", "detection reward weight"),
    key("ref_refresh", "INT", "steps between reference refreshes"),
    key("eval_interval", "INT", "steps between held-out evaluations"),
    key("eval_tasks", "INT", "held-out tasks per training evaluation"),
    key("fuel", "INT", "interpreter step budget"),
    key("sft_steps", "INT", "SFT steps"),
    key("sft_lr", "FLOAT", "SFT learning rate"),
    key("sft_batch", "INT", "SFT batch size"),
    key("sft_grad_clip", "FLOAT", "SFT gradient norm bound"),
    key("sft_tasks", "INT", "corpus tasks used to build SFT examples"),
    key("samples", "INT", "completions per task for pass@k"),
    key("fpr_cap", "FLOAT", "false-positive cap for the TPR metric"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    ZeroOutput,
}

impl From<InitMode> for Init {
    fn from(m: InitMode) -> Self {
        match m {
            InitMode::Random => Init::Random,
            InitMode::ZeroOutput => Init::ZeroOutput,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub base_lm: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub text_dir: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
}

/// Everything a command may use. Serialized whole into the run metadata.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub seed: u64,
    pub threads: usize,
    pub count: usize,
    pub tasks: usize,
    pub order: usize,
    pub lambda: f64,
    pub init_mode: InitMode,
    pub policy: PolicyConfig,
    pub watermark: WatermarkConfig,
    pub train: TrainConfig,
    pub sft: SftConfig,
    pub sft_tasks: usize,
    pub samples: usize,
    pub fpr_cap: f64,
    noise_keyed: bool,
    noise_key: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let watermark = WatermarkConfig::default();
        let noise_key = match watermark.noise {
            NoiseMode::Keyed { key } => key,
            NoiseMode::Noiseless => 0,
        };
        Self {
            paths: Paths::default(),
            seed: 0,
            threads: 1,
            count: 2000,
            tasks: 100,
            order: DEFAULT_ORDER,
            lambda: DEFAULT_LAMBDA,
            init_mode: InitMode::Random,
            policy: PolicyConfig::desk(),
            watermark,
            train: TrainConfig::default(),
            sft: SftConfig::default(),
            sft_tasks: 500,
            samples: 10,
            fpr_cap: 0.05,
            noise_keyed: true,
            noise_key,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, UsageError> {
    v.parse().map_err(|_| UsageError::new(key, format!("cannot parse {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64, UsageError> {
    match v.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).map_err(|_| UsageError::new(key, format!("cannot parse {v:?}"))),
        None => parse(key, v),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), UsageError> {
        let k = key.replace('-', "_");
        let k = k.as_str();
        let path = || Some(PathBuf::from(v));
        match k {
            "corpus" => self.paths.corpus = path(),
            "eval_corpus" => self.paths.eval_corpus = path(),
            "base_lm" => self.paths.base_lm = path(),
            "policy" => self.paths.policy = path(),
            "init" => self.paths.init = path(),
            "out" => self.paths.out = path(),
            "metrics" => self.paths.metrics = path(),
            "csv" => self.paths.csv = path(),
            "input" => self.paths.input = path(),
            "text_dir" => self.paths.text_dir = path(),
            "metadata" => self.paths.metadata = path(),
            "seed" => self.seed = parse_u64(k, v)?,
            "threads" => self.threads = parse(k, v)?,
            "count" => self.count = parse(k, v)?,
            "tasks" => self.tasks = parse(k, v)?,
            "order" => self.order = parse(k, v)?,
            "lambda" => self.lambda = parse(k, v)?,
            "init_mode" => {
                self.init_mode = match v {
                    "random" => InitMode::Random,
                    "zero_output" => InitMode::ZeroOutput,
                    _ => return Err(UsageError::new(k, format!("expected random or zero_output, got {v:?}"))),
                }
            }
            "context" => self.policy.context = parse(k, v)?,
            "d_model" => self.policy.d_model = parse(k, v)?,
            "layers" => self.policy.layers = parse(k, v)?,
            "heads" => self.policy.heads = parse(k, v)?,
            "ff" => self.policy.ff = parse(k, v)?,
            "delta" => self.watermark.delta = parse(k, v)?,
            "gamma" => self.watermark.gamma = parse(k, v)?,
            "switch_threshold" => self.watermark.switch_threshold = parse(k, v)?,
            "tau" => self.watermark.z_threshold = parse(k, v)?,
            "t_min" => self.watermark.min_watermarked = parse(k, v)?,
            "max_len" => self.watermark.max_completion = parse(k, v)?,
            "temperature" => self.watermark.temperature = parse(k, v)?,
            "relax_temperature" => self.watermark.relax_temperature = parse(k, v)?,
            "noise" => {
                self.noise_keyed = match v {
                    "keyed" => true,
                    "noiseless" => false,
                    _ => return Err(UsageError::new(k, format!("expected keyed or noiseless, got {v:?}"))),
                }
            }
            "key" => self.noise_key = parse_u64(k, v)?,
            "gate" => {
                self.watermark.gate = match v {
                    "policy" => GateMode::Policy,
                    "force_on" => GateMode::ForceOn,
                    "force_off" => GateMode::ForceOff,
                    _ => return Err(UsageError::new(k, format!("expected policy, force_on or force_off, got {v:?}"))),
                }
            }
            "min_code_tokens" => self.watermark.min_code_tokens = parse(k, v)?,
            "lr" => self.train.lr = parse(k, v)?,
            "min_lr_ratio" => self.train.min_lr_ratio = parse(k, v)?,
            "warmup_ratio" => self.train.warmup_ratio = parse(k, v)?,
            "steps" => self.train.steps = parse(k, v)?,
            "group_size" => self.train.group_size = parse(k, v)?,
            "clip_eps" => self.train.clip_eps = parse(k, v)?,
            "beta" => self.train.beta = parse(k, v)?,
            "entropy_coef" => self.train.entropy_coef = parse(k, v)?,
            "alpha" => self.train.alpha = parse(k, v)?,
            "grad_clip" => self.train.grad_clip = parse(k, v)?,
            "w_exec" => self.train.w_exec = parse(k, v)?,
            "w_wm" => self.train.w_wm = parse(k, v)?,
            "ref_refresh" => self.train.ref_refresh = parse(k, v)?,
            "eval_interval" => self.train.eval_interval = parse(k, v)?,
            "eval_tasks" => self.train.eval_tasks = parse(k, v)?,
            "fuel" => self.train.fuel = parse(k, v)?,
            "sft_steps" => self.sft.steps = parse(k, v)?,
            "sft_lr" => self.sft.lr = parse(k, v)?,
            "sft_batch" => self.sft.batch_size = parse(k, v)?,
            "sft_grad_clip" => self.sft.grad_clip = parse(k, v)?,
            "sft_tasks" => self.sft_tasks = parse(k, v)?,
            "samples" => self.samples = parse(k, v)?,
            "fpr_cap" => self.fpr_cap = parse(k, v)?,
            _ => return Err(UsageError::new(key, "unknown key")),
        }
        Ok(())
    }

    /// Fills in derived values once all settings are applied: the single
    /// seed feeds every stage, and the watermark shape follows the policy keys.
    pub fn resolve(&mut self) -> Result<(), UsageError> {
        self.watermark.noise =
            if self.noise_keyed { NoiseMode::Keyed { key: self.noise_key } } else { NoiseMode::Noiseless };
        self.watermark.context = self.policy.context;
        self.policy.gamma = self.watermark.gamma;
        self.policy.delta = self.watermark.delta;
        self.train.seed = self.seed;
        self.sft.seed = self.seed;
        if self.threads == 0 {
            return Err(UsageError::new("threads", "must be >= 1"));
        }
        if self.order == 0 {
            return Err(UsageError::new("order", "must be >= 1"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(UsageError::new("lambda", "must be > 0"));
        }
        if self.samples == 0 {
            return Err(UsageError::new("samples", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.fpr_cap) {
            return Err(UsageError::new("fpr_cap", "must lie in [0, 1]"));
        }
        if self.sft.batch_size == 0 {
            return Err(UsageError::new("sft_batch", "must be >= 1"));
        }
        self.watermark.validate().map_err(|e| UsageError { key: None, message: e.to_string() })?;
        self.train.validate().map_err(|e| UsageError { key: None, message: e.to_string() })?;
        self.policy.validate().map_err(|e| UsageError { key: None, message: e.to_string() })?;
        Ok(())
    }

    /// Watermark settings for a loaded policy, whose window width wins over the config.
    pub fn watermark_for(&self, policy: &PolicyConfig) -> WatermarkConfig {
        WatermarkConfig { context: policy.context, ..self.watermark.clone() }
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(UsageError { key: None, message: format!("config line {}: expected `key = value`", i + 1) });
        };
        let k = k.trim().replace('-', "_");
        if !KEYS.iter().any(|key| key.name == k) {
            return Err(UsageError::new(k, format!("unknown key on config line {}", i + 1)));
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(UsageError::new(k, format!("repeated on config line {}", i + 1)));
        }
    }
    Ok(out)
}

pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError::new("config", format!("cannot read {}: {e}", path.display())))?;
    parse_config_text(&text)
}
