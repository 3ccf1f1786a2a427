//! Dataset loading and append-only trace files.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Lines, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dialogue::Trace;
use crate::reward::RewardBreakdown;

pub const TRACE_SCHEMA: &str = "arr-trace/1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("duplicate id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub query_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
}

#[derive(Deserialize)]
struct DatasetLine {
    id: String,
    question: String,
    golden_answers: Vec<String>,
}

/// Reads a JSONL dataset with fields `id`, `question` and `golden_answers`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QaExample>, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut seen = HashSet::new();
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: DatasetLine = serde_json::from_str(&line).map_err(|e| StoreError::SchemaViolation {
            line: lineno,
            message: e.to_string(),
        })?;
        if raw.golden_answers.is_empty() {
            return Err(StoreError::SchemaViolation {
                line: lineno,
                message: "golden_answers is empty".into(),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(StoreError::DuplicateId {
                id: raw.id,
                line: lineno,
            });
        }
        examples.push(QaExample {
            query_id: raw.id,
            question: raw.question,
            gold_answers: raw.golden_answers,
        });
    }
    Ok(examples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema: String,
    pub trace: Trace,
    pub reward: RewardBreakdown,
}

impl TraceRecord {
    pub fn new(trace: Trace, reward: RewardBreakdown) -> Self {
        Self {
            schema: TRACE_SCHEMA.to_string(),
            trace,
            reward,
        }
    }
}

fn record_line(trace: &Trace, reward: &RewardBreakdown) -> Result<Vec<u8>, StoreError> {
    let record = TraceRecord::new(trace.clone(), reward.clone());
    let mut line = serde_json::to_vec(&record).map_err(std::io::Error::from)?;
    line.push(b'\n');
    Ok(line)
}

/// Appends one record to `path`, creating the file if needed.
pub fn append_trace(trace: &Trace, reward: &RewardBreakdown, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(&record_line(trace, reward)?)?;
    file.flush()?;
    Ok(())
}

/// Shared appender; each record is written with one call under a lock.
#[derive(Debug)]
pub struct TraceWriter {
    file: Mutex<File>,
}

impl TraceWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        Ok(Self {
            file: Mutex::new(File::create(path)?),
        })
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }

    pub fn write(&self, trace: &Trace, reward: &RewardBreakdown) -> Result<(), StoreError> {
        let line = record_line(trace, reward)?;
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(&line)?;
        file.flush()?;
        Ok(())
    }
}

/// A skipped line in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadWarning {
    pub line: usize,
    pub message: String,
}

/// Lazy iterator over a trace file.
pub struct TraceReader {
    lines: Lines<BufReader<File>>,
    line: usize,
    strict: bool,
    warnings: Vec<ReadWarning>,
}

impl TraceReader {
    pub fn warnings(&self) -> &[ReadWarning] {
        &self.warnings
    }

    fn decode(line: &str) -> Result<(Trace, RewardBreakdown), String> {
        let record: TraceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if record.schema != TRACE_SCHEMA {
            return Err(format!("unsupported schema {:?}", record.schema));
        }
        Ok((record.trace, record.reward))
    }
}

impl Iterator for TraceReader {
    type Item = Result<(Trace, RewardBreakdown), StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if line.trim().is_empty() {
                continue;
            }
            match Self::decode(&line) {
                Ok(item) => return Some(Ok(item)),
                Err(message) if self.strict => {
                    return Some(Err(StoreError::SchemaViolation {
                        line: self.line,
                        message,
                    }))
                }
                Err(message) => {
                    log::warn!("skipping trace line {}: {message}", self.line);
                    self.warnings.push(ReadWarning {
                        line: self.line,
                        message,
                    });
                }
            }
        }
    }
}

/// Opens a trace file. In strict mode a malformed line yields
/// `SchemaViolation`; otherwise it is skipped and recorded as a warning.
pub fn read_traces(path: impl AsRef<Path>, strict: bool) -> Result<TraceReader, StoreError> {
    Ok(TraceReader {
        lines: BufReader::new(File::open(path)?).lines(),
        line: 0,
        strict,
        warnings: Vec::new(),
    })
}
