//! Dataset ingestion: canonical JSONL records and a SQuAD adapter.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::text::{detokenize, tokenize};

pub const DEFAULT_MAX_PASSAGE_LEN: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Query is the answer, target the question.
    Qg,
    /// Query is the question, target the answer.
    Qa,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qg" => Ok(TaskMode::Qg),
            "qa" => Ok(TaskMode::Qa),
            other => Err(Error::contract(format!("unknown task mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub id: String,
    pub passage: Vec<String>,
    pub query: Vec<String>,
    pub target: Vec<String>,
}

impl TrainingExample {
    pub fn from_text(id: impl Into<String>, passage: &str, query: &str, target: &str) -> Self {
        Self {
            id: id.into(),
            passage: tokenize(passage),
            query: tokenize(query),
            target: tokenize(target),
        }
    }

    /// Keeps at most `max_len` passage tokens; returns whether anything was cut.
    pub fn truncate_passage(&mut self, max_len: usize) -> bool {
        if self.passage.len() > max_len {
            self.passage.truncate(max_len);
            true
        } else {
            false
        }
    }
}

/// One canonical JSONL line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub passage: String,
    pub query: String,
    pub target: String,
}

impl From<&TrainingExample> for Record {
    fn from(ex: &TrainingExample) -> Self {
        Self {
            id: ex.id.clone(),
            passage: detokenize(&ex.passage),
            query: detokenize(&ex.query),
            target: detokenize(&ex.target),
        }
    }
}

fn field<'a>(obj: &'a Value, name: &str, line: usize) -> Result<&'a str> {
    match obj.get(name) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(Error::Schema {
            path: format!("line {line}: {name}"),
            message: "expected a string".into(),
        }),
        None => Err(Error::Schema {
            path: format!("line {line}: {name}"),
            message: format!("missing field \"{name}\""),
        }),
    }
}

/// Reads JSON objects one per line; `target` may be absent when `require_target` is off.
fn read_lines(path: &Path, require_target: bool) -> Result<Vec<(usize, Value)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if !v.is_object() {
            return Err(Error::Parse {
                line: lineno,
                message: "expected a JSON object".into(),
            });
        }
        for name in ["id", "passage", "query"] {
            field(&v, name, lineno)?;
        }
        if require_target {
            field(&v, "target", lineno)?;
        }
        out.push((lineno, v));
    }
    Ok(out)
}

/// Loads canonical JSONL (`id`, `passage`, `query`, `target`), tokenizing each field.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    read_lines(path.as_ref(), true)?
        .into_iter()
        .map(|(line, v)| {
            Ok(TrainingExample::from_text(
                field(&v, "id", line)?,
                field(&v, "passage", line)?,
                field(&v, "query", line)?,
                field(&v, "target", line)?,
            ))
        })
        .collect()
}

/// Like [`load_jsonl`] but `target` is optional (left empty when absent).
pub fn load_inputs(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    read_lines(path.as_ref(), false)?
        .into_iter()
        .map(|(line, v)| {
            let target = match v.get("target") {
                Some(_) => field(&v, "target", line)?,
                None => "",
            };
            Ok(TrainingExample::from_text(
                field(&v, "id", line)?,
                field(&v, "passage", line)?,
                field(&v, "query", line)?,
                target,
            ))
        })
        .collect()
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, &Record::from(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Converts SQuAD-format JSON into examples, one per question.
///
/// Each qa uses its first answer. Answers need not occur in the context.
pub fn squad_adapter(path: impl AsRef<Path>, mode: TaskMode) -> Result<Vec<TrainingExample>> {
    let root: Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    squad_from_value(&root, mode)
}

fn schema(path: String, message: &str) -> Error {
    Error::Schema {
        path,
        message: message.into(),
    }
}

pub fn squad_from_value(root: &Value, mode: TaskMode) -> Result<Vec<TrainingExample>> {
    let articles = root
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| schema("$.data".into(), "expected an array"))?;
    let mut out = Vec::new();
    for (a, article) in articles.iter().enumerate() {
        let paragraphs = article
            .get("paragraphs")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(format!("$.data[{a}].paragraphs"), "expected an array"))?;
        for (p, para) in paragraphs.iter().enumerate() {
            let ppath = format!("$.data[{a}].paragraphs[{p}]");
            let context = para
                .get("context")
                .and_then(Value::as_str)
                .ok_or_else(|| schema(format!("{ppath}.context"), "expected a string"))?;
            let qas = para
                .get("qas")
                .and_then(Value::as_array)
                .ok_or_else(|| schema(format!("{ppath}.qas"), "expected an array"))?;
            for (q, qa) in qas.iter().enumerate() {
                let qpath = format!("{ppath}.qas[{q}]");
                let question = qa
                    .get("question")
                    .and_then(Value::as_str)
                    .ok_or_else(|| schema(format!("{qpath}.question"), "expected a string"))?;
                let answer = qa
                    .get("answers")
                    .and_then(Value::as_array)
                    .and_then(|a| a.first())
                    .and_then(|a| a.get("text"))
                    .and_then(Value::as_str)
                    .ok_or_else(|| schema(format!("{qpath}.answers[0].text"), "expected a string"))?;
                let id = match qa.get("id") {
                    Some(Value::String(s)) => s.clone(),
                    _ => format!("{a}-{p}-{q}"),
                };
                let (query, target) = match mode {
                    TaskMode::Qg => (answer, question),
                    TaskMode::Qa => (question, answer),
                };
                out.push(TrainingExample::from_text(id, context, query, target));
            }
        }
    }
    Ok(out)
}

/// Train/dev/test sizes: floor of each ratio, remainder to train.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let dev = (n as f64 * b).floor() as usize;
    let test = (n as f64 * c).floor() as usize;
    Ok((n - dev - test, dev, test))
}

/// Seeded shuffle, then contiguous train/dev/test cut.
pub fn split_dataset<X: Clone>(
    examples: &[X],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<X>, Vec<X>, Vec<X>)> {
    let (train, dev, _) = split_sizes(examples.len(), ratios)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let pick = |r: &[usize]| r.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..train]),
        pick(&order[train..train + dev]),
        pick(&order[train + dev..]),
    ))
}

/// Truncates long passages, logging a warning per truncated example.
pub fn truncate_passages(examples: &mut [TrainingExample], max_len: usize) {
    for ex in examples {
        let len = ex.passage.len();
        if ex.truncate_passage(max_len) {
            log::warn!("example {}: passage truncated from {len} to {max_len} tokens", ex.id);
        }
    }
}
