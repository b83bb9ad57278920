//! Dataset and results files: JSONL with a schema-version header record.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::inference::InferenceResult;
use crate::taskgen::{
    parse_question, Family, Level, ObjColor, ObjShape, Provenance, Sample, Scene,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CellRecord(u8, u8, ObjShape, ObjColor, u8);

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    rows: u8,
    cols: u8,
    cells: Vec<CellRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    scene: SceneRecord,
    family: Family,
    level: Level,
    question: String,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale_correct: Option<bool>,
    provenance: Provenance,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        SampleRecord {
            id: s.id.clone(),
            scene: SceneRecord {
                rows: s.scene.rows,
                cols: s.scene.cols,
                cells: s
                    .scene
                    .cells
                    .iter()
                    .map(|c| CellRecord(c.row, c.col, c.shape, c.color, c.value))
                    .collect(),
            },
            family: s.family(),
            level: s.level,
            question: s.question_text(),
            answer: s.gold.clone(),
            description: s.description.clone(),
            rationale: s.rationale.clone(),
            rationale_correct: s.rationale_correct,
            provenance: s.provenance,
        }
    }
}

impl SampleRecord {
    fn into_sample(self) -> Result<Sample, HarnessError> {
        let question = parse_question(&self.question)
            .ok_or_else(|| HarnessError::Format(format!("unparseable question: {}", self.question)))?;
        if question.family() != self.family {
            return Err(HarnessError::Format(format!(
                "family field {} disagrees with question {:?}",
                self.family.name(),
                question
            )));
        }
        let scene = Scene {
            rows: self.scene.rows,
            cols: self.scene.cols,
            cells: self
                .scene
                .cells
                .into_iter()
                .map(|CellRecord(row, col, shape, color, value)| crate::taskgen::Cell {
                    row,
                    col,
                    shape,
                    color,
                    value,
                })
                .collect(),
        };
        scene.validate().map_err(|e| HarnessError::Format(e.to_string()))?;
        Ok(Sample {
            id: self.id,
            scene,
            question,
            level: self.level,
            gold: self.answer,
            description: self.description,
            rationale: self.rationale,
            rationale_correct: self.rationale_correct,
            provenance: self.provenance,
        })
    }
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    kind: &str,
    items: impl Iterator<Item = T>,
) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &Header { schema_version: SCHEMA_VERSION, kind: kind.into() })?;
    f.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut f, &item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    kind: &str,
) -> Result<Vec<T>, HarnessError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| HarnessError::Format(format!("{}: empty file", path.display())))??;
    let header: Header = serde_json::from_str(&header_line)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::SchemaVersion {
            found: header.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if header.kind != kind {
        return Err(HarnessError::Format(format!(
            "{}: expected a {} file, found {}",
            path.display(),
            kind,
            header.kind
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<(), HarnessError> {
    write_jsonl(path, "dataset", samples.iter().map(SampleRecord::from))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, HarnessError> {
    read_jsonl::<SampleRecord>(path, "dataset")?
        .into_iter()
        .map(SampleRecord::into_sample)
        .collect()
}

pub fn save_results(path: &Path, results: &[InferenceResult]) -> Result<(), HarnessError> {
    write_jsonl(path, "results", results.iter())
}

pub fn load_results(path: &Path) -> Result<Vec<InferenceResult>, HarnessError> {
    read_jsonl(path, "results")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_dataset, oracle_description, GenConfig};

    #[test]
    fn dataset_round_trip_is_structural_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let config = GenConfig { master_seed: 44, ..GenConfig::default() };
        let mut samples = generate_dataset(&config, 80, "io").unwrap();
        for s in samples.iter_mut().take(40) {
            s.description = Some(oracle_description(s));
        }
        save_dataset(&path, &samples).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(samples, loaded);
        // Header is the first line and carries the schema version.
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.contains("\"schema_version\":1"));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"schema_version\":99,\"kind\":\"dataset\"}\n").unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(HarnessError::SchemaVersion { found: 99, .. })
        ));
    }

    #[test]
    fn lines_parse_independently() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let config = GenConfig { master_seed: 45, ..GenConfig::default() };
        let samples = generate_dataset(&config, 5, "io2").unwrap();
        save_dataset(&path, &samples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines().skip(1) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("id").is_some());
            assert!(v.get("scene").is_some());
        }
    }
}
