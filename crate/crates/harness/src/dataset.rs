//! JSON-lines datasets: `{"id", "input", "reference"?, "task"}` per line.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub task: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("dataset line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset: {0}")]
    Io(#[from] std::io::Error),
}

pub fn parse_dataset(text: &str) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = n + 1;
        let rec: DatasetRecord =
            serde_json::from_str(raw).map_err(|e| DatasetError::BadLine { line, reason: e.to_string() })?;
        if rec.id.is_empty() {
            return Err(DatasetError::BadLine { line, reason: "empty id".into() });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(DatasetError::DuplicateId { line, id: rec.id });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, DatasetError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}
