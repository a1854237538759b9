//! Frozen base generator: an add-λ smoothed n-gram over MiniLang tokens with
//! highest-observed-order back-off.
//!
//! For a context, the longest suffix (at most `order - 1` tokens) that occurred in
//! training selects the count table, and
//! `P(w | ctx) = (c(ctx, w) + λ) / (c(ctx) + λ |V|)`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Deref;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Task;
use crate::minilang::vocab::END;
use crate::minilang::{TokenId, Vocabulary};
use crate::scalar::{softmax, Scalar};

pub const DEFAULT_ORDER: usize = 10;
pub const DEFAULT_LAMBDA: f64 = 0.001;

/// Real vector of length |V| on the natural-log scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector<S> {
    pub values: Vec<S>,
}

impl<S: Scalar> LogitVector<S> {
    pub fn new(values: Vec<S>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![S::zero(); len] }
    }

    pub fn probabilities(&self) -> Vec<S> {
        softmax(&self.values)
    }
}

impl<S> Deref for LogitVector<S> {
    type Target = [S];
    fn deref(&self) -> &[S] {
        &self.values
    }
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid n-gram configuration: {0}")]
    InvalidConfig(String),
    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("model was fitted over a different vocabulary")]
    VocabHashMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct ContextCounts {
    total: u64,
    counts: Vec<u32>,
}

/// The fitted model. There are no mutating methods; a fitted model is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseLm {
    order: usize,
    lambda: f64,
    vocab_size: usize,
    tables: HashMap<Vec<TokenId>, ContextCounts>,
}

impl BaseLm {
    /// Fits on `prompt ++ reference ++ END` for every task.
    pub fn fit(tasks: &[Task], order: usize, lambda: f64) -> Result<Self, LmError> {
        let seqs: Vec<Vec<TokenId>> = tasks
            .iter()
            .map(|t| {
                let mut s = t.full_reference();
                s.push(END);
                s
            })
            .collect();
        Self::fit_sequences(&seqs, order, lambda)
    }

    pub fn fit_sequences(seqs: &[Vec<TokenId>], order: usize, lambda: f64) -> Result<Self, LmError> {
        if order < 1 {
            return Err(LmError::InvalidConfig("order must be at least 1".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(LmError::InvalidConfig("lambda must be positive".into()));
        }
        if seqs.iter().all(|s| s.is_empty()) {
            return Err(LmError::EmptyCorpus);
        }
        let vocab_size = Vocabulary::standard().len();
        let mut tables: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        for seq in seqs {
            for (i, &next) in seq.iter().enumerate() {
                for m in 0..order.min(i + 1) {
                    let entry = tables.entry(seq[i - m..i].to_vec()).or_insert_with(|| {
                        ContextCounts { total: 0, counts: vec![0; vocab_size] }
                    });
                    entry.total += 1;
                    entry.counts[next.index()] += 1;
                }
            }
        }
        Ok(Self { order, lambda, vocab_size, tables })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Length of the context suffix that selects the distribution for `context`.
    pub fn backoff_order(&self, context: &[TokenId]) -> usize {
        let max = (self.order - 1).min(context.len());
        (0..=max)
            .rev()
            .find(|&m| self.tables.contains_key(&context[context.len() - m..]))
            .unwrap_or(0)
    }

    /// Smoothed next-token probabilities in f64.
    pub fn next_distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let m = self.backoff_order(context);
        let table = &self.tables[&context[context.len() - m..]];
        let denom = table.total as f64 + self.lambda * self.vocab_size as f64;
        table.counts.iter().map(|&c| (c as f64 + self.lambda) / denom).collect()
    }

    pub fn next_logits<S: Scalar>(&self, context: &[TokenId]) -> LogitVector<S> {
        LogitVector::new(self.next_distribution(context).into_iter().map(|p| S::of(p.ln())).collect())
    }

    /// Deterministic digest of every count table; unchanged for the model's lifetime.
    pub fn content_hash(&self) -> String {
        let mut keys: Vec<&Vec<TokenId>> = self.tables.keys().collect();
        keys.sort();
        let mut h = Sha256::new();
        h.update((self.order as u64).to_le_bytes());
        h.update(self.lambda.to_le_bytes());
        for k in keys {
            h.update((k.len() as u64).to_le_bytes());
            for t in k {
                h.update(t.0.to_le_bytes());
            }
            for c in &self.tables[k].counts {
                h.update(c.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Flat text format:
    ///
    /// ```text
    /// codemark-ngram 1 <order> <lambda> <vocab-hash-hex> <n-contexts>
    /// <ctx ids, comma separated, or "-">\t<id>:<count> <id>:<count> ...
    /// ```
    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(
            out,
            "codemark-ngram 1 {} {:?} {:016x} {}",
            self.order,
            self.lambda,
            Vocabulary::standard().hash(),
            self.tables.len()
        )?;
        let mut keys: Vec<&Vec<TokenId>> = self.tables.keys().collect();
        keys.sort();
        for k in keys {
            let ctx = if k.is_empty() {
                "-".to_string()
            } else {
                k.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(",")
            };
            let counts: Vec<String> = self.tables[k]
                .counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(i, c)| format!("{i}:{c}"))
                .collect();
            writeln!(out, "{ctx}\t{}", counts.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let bad = |line: usize, message: &str| LmError::Format { line, message: message.into() };
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header"))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "codemark-ngram" || fields[1] != "1" {
            return Err(bad(1, "unrecognized header"));
        }
        let order: usize = fields[2].parse().map_err(|_| bad(1, "order"))?;
        let lambda: f64 = fields[3].parse().map_err(|_| bad(1, "lambda"))?;
        if fields[4] != format!("{:016x}", Vocabulary::standard().hash()) {
            return Err(LmError::VocabHashMismatch);
        }
        let n: usize = fields[5].parse().map_err(|_| bad(1, "context count"))?;
        let vocab_size = Vocabulary::standard().len();
        let mut tables = HashMap::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            let (ctx, counts) = line.split_once('\t').ok_or_else(|| bad(line_no, "missing tab"))?;
            let key: Vec<TokenId> = if ctx == "-" {
                Vec::new()
            } else {
                ctx.split(',')
                    .map(|s| s.parse::<u16>().map(TokenId))
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(line_no, "context id"))?
            };
            let mut table = ContextCounts { total: 0, counts: vec![0; vocab_size] };
            for item in counts.split_whitespace() {
                let (id, c) = item.split_once(':').ok_or_else(|| bad(line_no, "count record"))?;
                let id: usize = id.parse().map_err(|_| bad(line_no, "token id"))?;
                let c: u32 = c.parse().map_err(|_| bad(line_no, "count"))?;
                if id >= vocab_size {
                    return Err(bad(line_no, "token id out of range"));
                }
                table.counts[id] = c;
                table.total += c as u64;
            }
            tables.insert(key, table);
        }
        if tables.len() != n || !tables.contains_key(&Vec::new()) {
            return Err(bad(n + 2, "context count mismatch"));
        }
        Ok(Self { order, lambda, vocab_size, tables })
    }
}

/// Draws from `softmax(logits / temperature)` using the caller's RNG stream.
pub fn sample_token<S: Scalar, R: Rng + ?Sized>(logits: &[S], temperature: f64, rng: &mut R) -> TokenId {
    assert!(temperature > 0.0, "temperature must be positive");
    let t = S::of(temperature);
    let scaled: Vec<S> = logits.iter().map(|&l| l / t).collect();
    sample_from_probs(&softmax(&scaled), rng)
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_from_probs<S: Scalar, R: Rng + ?Sized>(probs: &[S], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64_lossless();
        if u < acc {
            return TokenId(i as u16);
        }
    }
    // Rounding left a sliver of mass uncovered; fall back to the last positive entry.
    let last = probs.iter().rposition(|p| *p > S::zero()).unwrap_or(probs.len() - 1);
    TokenId(last as u16)
}

/// Shannon entropy of `softmax(logits)` in nats.
pub fn token_entropy<S: Scalar>(logits: &[S]) -> S {
    softmax(logits)
        .into_iter()
        .filter(|&p| p > S::zero())
        .map(|p| -p * p.ln())
        .sum()
}
