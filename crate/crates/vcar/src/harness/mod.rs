//! Evaluation, persistence, experiment orchestration, and the CLI surface.

pub mod checkpoint;
pub mod cli;
pub mod experiment;
pub mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AdapterError;
use crate::inference::{InferError, InferenceResult};
use crate::model::ModelError;
use crate::taskgen::{Family, Level, Sample, TaskGenError};
use crate::teacher::TeacherError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("{path}: corrupt blob (checksum mismatch)")]
    ChecksumMismatch { path: String },
    #[error("{path}: truncated blob: need {need} bytes, found {found}")]
    TruncatedBlob { path: String, need: usize, found: usize },
    #[error("result ids do not cover the dataset: {0}")]
    IdMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, #[source] source: Box<HarnessError> },
    #[error("file format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Infer(#[from] InferError),
}

const CLOSED_UNITS: [&str; 10] = [
    "yard", "yards", "unit", "units", "point", "points", "meter", "meters", "dollar", "dollars",
];

/// Canonical answer form: trimmed, lowercased, unit words stripped, numeric
/// strings normalized ("3.0" -> "3", "+6" -> "6").
pub fn normalize_answer(raw: &str, _family: Family) -> String {
    let lowered = raw.trim().to_lowercase();
    let words: Vec<&str> = lowered
        .split(|c: char| c.is_whitespace())
        .filter(|w| !w.is_empty() && !CLOSED_UNITS.contains(w))
        .collect();
    let joined = words.join(" ");
    if let Ok(v) = joined.parse::<f64>() {
        if v.fract() == 0.0 && v.abs() < 1e15 {
            return format!("{}", v as i64);
        }
    }
    joined
}

/// First signed integer in the text; else the first word from the family's
/// closed answer set; else nothing.
pub fn extract_answer_text(text: &str, family: Family) -> Option<String> {
    let words: Vec<String> = text
        .split(|c: char| c.is_whitespace() || "().,?:;!".contains(c))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect();
    for w in &words {
        let candidate = w.strip_prefix('+').unwrap_or(w);
        if candidate.parse::<i64>().is_ok() {
            return Some(normalize_answer(candidate, family));
        }
    }
    let options = family.option_words();
    words.iter().find(|w| options.contains(&w.as_str())).cloned()
}

/// Final-answer extraction from a rationale: the span after the answer
/// turn, parsed like a generated continuation.
pub fn extract_final_from_rationale(text: &str, family: Family) -> Option<String> {
    let tail = text.rsplit("So the final answer is").next()?;
    if tail.len() == text.len() {
        return None;
    }
    extract_answer_text(tail, family)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SliceStats {
    pub correct: usize,
    pub count: usize,
    pub accuracy: f64,
}

impl SliceStats {
    fn add(&mut self, correct: bool) {
        self.count += 1;
        if correct {
            self.correct += 1;
        }
        self.accuracy = self.correct as f64 / self.count as f64;
    }
}

/// Category-stratified accuracy report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub seed: u64,
    pub manifest_ref: String,
    pub n: usize,
    pub correct: usize,
    pub overall: f64,
    pub per_level: BTreeMap<String, SliceStats>,
    pub per_family: BTreeMap<String, SliceStats>,
}

impl EvalReport {
    /// Accuracy over the union of the named level slices.
    pub fn level_union_accuracy(&self, levels: &[Level]) -> f64 {
        let mut correct = 0;
        let mut count = 0;
        for l in levels {
            if let Some(s) = self.per_level.get(l.name()) {
                correct += s.correct;
                count += s.count;
            }
        }
        if count == 0 {
            0.0
        } else {
            correct as f64 / count as f64
        }
    }

    /// Table-style rendering: one row of level and family accuracies.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mode {}  seed {}  n {}\n", self.mode, self.seed, self.n));
        out.push_str(&format!("{:<10}", "ALL"));
        for l in Level::ALL {
            out.push_str(&format!("{:>8}", l.name()));
        }
        for f in Family::ALL {
            out.push_str(&format!("{:>10}", f.name()));
        }
        out.push('\n');
        out.push_str(&format!("{:<10.3}", self.overall));
        for l in Level::ALL {
            let acc = self.per_level.get(l.name()).map(|s| s.accuracy).unwrap_or(0.0);
            out.push_str(&format!("{:>8.3}", acc));
        }
        for f in Family::ALL {
            let acc = self.per_family.get(f.name()).map(|s| s.accuracy).unwrap_or(0.0);
            out.push_str(&format!("{:>10.3}", acc));
        }
        out.push('\n');
        out
    }
}

/// Scores results against the dataset: correct iff the normalized
/// extraction equals the normalized gold answer; failed extractions count
/// as incorrect. Requires exactly one result per dataset sample.
pub fn evaluate(
    results: &[InferenceResult],
    dataset: &[Sample],
    mode: &str,
    seed: u64,
    manifest_ref: &str,
) -> Result<EvalReport, HarnessError> {
    let by_id: BTreeMap<&str, &Sample> = dataset.iter().map(|s| (s.id.as_str(), s)).collect();
    if results.len() != dataset.len() {
        return Err(HarnessError::IdMismatch(format!(
            "{} results for {} samples",
            results.len(),
            dataset.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut per_level: BTreeMap<String, SliceStats> = BTreeMap::new();
    let mut per_family: BTreeMap<String, SliceStats> = BTreeMap::new();
    let mut correct_total = 0usize;

    for r in results {
        let sample = by_id
            .get(r.sample_id.as_str())
            .ok_or_else(|| HarnessError::IdMismatch(format!("unknown id {}", r.sample_id)))?;
        if !seen.insert(r.sample_id.as_str()) {
            return Err(HarnessError::IdMismatch(format!("duplicate id {}", r.sample_id)));
        }
        let family = sample.family();
        let correct = r
            .extracted
            .as_deref()
            .map(|e| normalize_answer(e, family) == normalize_answer(&sample.gold, family))
            .unwrap_or(false);
        if correct {
            correct_total += 1;
        }
        per_level.entry(sample.level.name().to_string()).or_default().add(correct);
        per_family.entry(family.name().to_string()).or_default().add(correct);
    }

    Ok(EvalReport {
        mode: mode.to_string(),
        seed,
        manifest_ref: manifest_ref.to_string(),
        n: results.len(),
        correct: correct_total,
        overall: correct_total as f64 / results.len().max(1) as f64,
        per_level,
        per_family,
    })
}
