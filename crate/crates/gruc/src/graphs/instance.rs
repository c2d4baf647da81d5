//! Instance schema and I/O.
//!
//! One instance is a JSON object:
//!
//! ```json
//! {
//!   "id": "q42",
//!   "question": ["what", "animal", "is", "this"],
//!   "detections": [
//!     {"bbox": [0.0, 0.0, 2.0, 2.0], "feature": [0.1, 0.2], "label": ["bear"], "score": 0.97}
//!   ],
//!   "semantic_tuples": [["bear", "standing on", "rock"]],
//!   "facts": [["polar bear", "is a", "mammal"]],
//!   "answer": "polar bear",
//!   "relation_label": "is a"
//! }
//! ```
//!
//! Datasets are JSONL, one instance per line. Questions arrive pre-tokenized
//! and are used as-is. Schema violations name the instance and the offending
//! field; JSONL errors also carry the line number.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, FactTriplet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub bbox: BBox,
    pub feature: Vec<f64>,
    /// Label words; may be empty.
    pub label: Vec<String>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceBundle {
    pub id: String,
    pub question: Vec<String>,
    pub detections: Vec<DetectionRecord>,
    pub semantic_tuples: Vec<FactTriplet>,
    pub facts: Vec<FactTriplet>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_label: Option<String>,
}

impl InstanceBundle {
    /// Structural checks beyond what serde enforces. Dimension agreement with
    /// a model configuration is checked separately at pipeline entry.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Schema {
            instance: self.id.clone(),
            message,
        };
        if self.id.trim().is_empty() {
            return Err(fail("id is empty".into()));
        }
        if self.question.is_empty() {
            return Err(fail("question has no tokens".into()));
        }
        if self.question.iter().any(|t| t.trim().is_empty()) {
            return Err(fail("question contains an empty token".into()));
        }
        if self.answer.trim().is_empty() {
            return Err(fail("answer is empty".into()));
        }
        let feature_dim = self.detections.first().map(|d| d.feature.len());
        for (i, d) in self.detections.iter().enumerate() {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(fail(format!("detections[{i}].score {} outside [0, 1]", d.score)));
            }
            if d.feature.is_empty() {
                return Err(fail(format!("detections[{i}].feature is empty")));
            }
            if d.feature.len() != feature_dim.unwrap() {
                return Err(fail(format!(
                    "detections[{i}].feature has {} dims, detections[0] has {}",
                    d.feature.len(),
                    feature_dim.unwrap()
                )));
            }
            if !d.feature.iter().all(|v| v.is_finite()) {
                return Err(fail(format!("detections[{i}].feature has a non-finite value")));
            }
            // BBox validity is enforced by its deserializer; re-checked here
            // for bundles built in code.
            if let Err(e) = BBox::new(d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h) {
                return Err(fail(format!("detections[{i}].bbox: {e}")));
            }
        }
        if let Some(r) = &self.relation_label {
            if r.trim().is_empty() {
                return Err(fail("relation_label is empty".into()));
            }
        }
        Ok(())
    }
}

/// Extracts the instance id from raw JSON for error attribution, before full
/// deserialization has a chance to fail.
fn peek_id(value: &serde_json::Value) -> String {
    value
        .get("id")
        .and_then(serde_json::Value::as_str)
        .unwrap_or("<unknown>")
        .to_string()
}

fn instance_from_value(value: serde_json::Value) -> Result<InstanceBundle> {
    let id = peek_id(&value);
    let bundle: InstanceBundle = serde_json::from_value(value).map_err(|e| Error::Schema {
        instance: id,
        message: e.to_string(),
    })?;
    bundle.validate()?;
    Ok(bundle)
}

/// Parses one instance from a JSON document. `origin` names the source in
/// errors (a path, or something like `<memory>`).
pub fn parse_instance(text: &str, origin: &str) -> Result<InstanceBundle> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|source| Error::Json {
        path: origin.to_string(),
        source,
    })?;
    instance_from_value(value)
}

pub fn load_instance(path: &Path) -> Result<InstanceBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_instance(&text, &path.display().to_string())
}

pub fn save_instance(path: &Path, instance: &InstanceBundle) -> Result<()> {
    let text = serde_json::to_string_pretty(instance).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses a JSONL dataset from any reader. Blank lines are skipped; any
/// malformed line fails the whole parse with its line number, attributed to
/// `origin`.
pub fn parse_dataset(reader: impl BufRead, origin: &str) -> Result<Vec<InstanceBundle>> {
    let mut instances = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(origin.to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        let instance = instance_from_value(value).map_err(|e| match e {
            Error::Schema { instance, message } => Error::Parse {
                path: origin.to_string(),
                line: lineno,
                message: format!("instance `{instance}`: {message}"),
            },
            other => other,
        })?;
        instances.push(instance);
    }
    Ok(instances)
}

/// Loads a JSONL dataset from disk.
pub fn load_dataset(path: &Path) -> Result<Vec<InstanceBundle>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_dataset(BufReader::new(file), &path.display().to_string())
}

pub fn save_dataset(path: &Path, instances: &[InstanceBundle]) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    for instance in instances {
        let line = serde_json::to_string(instance).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        writeln!(out, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush().map_err(|e| Error::io(path.display().to_string(), e))
}
