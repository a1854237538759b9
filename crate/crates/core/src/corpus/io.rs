use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Task;
use crate::minilang::Vocabulary;

const KIND: &str = "codemark-tasks";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    vocab_hash: String,
    count: usize,
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FormatError {
    /// 1-based line of the malformed record, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            FormatError::Malformed { line, .. } => Some(*line),
            FormatError::Io(_) => None,
        }
    }
}

fn malformed(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Malformed { line, message: message.into() }
}

/// Writes a header line followed by one JSON record per task.
pub fn write_tasks<W: Write>(mut out: W, tasks: &[Task]) -> Result<(), FormatError> {
    let header = Header {
        kind: KIND.into(),
        version: VERSION,
        vocab_hash: format!("{:016x}", Vocabulary::standard().hash()),
        count: tasks.len(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for task in tasks {
        serde_json::to_writer(&mut out, task).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tasks<R: Read>(input: R) -> Result<Vec<Task>, FormatError> {
    let vocab = Vocabulary::standard();
    let mut lines = BufReader::new(input).lines();
    let header_line = lines.next().ok_or_else(|| malformed(1, "missing header"))??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| malformed(1, e.to_string()))?;
    if header.kind != KIND || header.version != VERSION {
        return Err(malformed(1, format!("unsupported header {}/{}", header.kind, header.version)));
    }
    if header.vocab_hash != format!("{:016x}", vocab.hash()) {
        return Err(malformed(1, "vocabulary hash mismatch"));
    }
    let mut tasks = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let task: Task =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let ids_ok = task.prompt.iter().chain(&task.reference).all(|&t| vocab.is_valid(t));
        if !ids_ok || task.suite.cases.is_empty() {
            return Err(malformed(line_no, "invalid token id or empty suite"));
        }
        tasks.push(task);
    }
    if tasks.len() != header.count {
        return Err(malformed(
            tasks.len() + 2,
            format!("expected {} records, found {}", header.count, tasks.len()),
        ));
    }
    Ok(tasks)
}

pub fn save_tasks(path: &Path, tasks: &[Task]) -> Result<(), FormatError> {
    write_tasks(BufWriter::new(File::create(path)?), tasks)
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>, FormatError> {
    read_tasks(File::open(path)?)
}
