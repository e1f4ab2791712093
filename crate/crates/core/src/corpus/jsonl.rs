//! JSONL record schemas and file I/O.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// One train/valid line: a context with a candidate response and its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub context: Vec<String>,
    pub last_utterance: String,
    pub response: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_flag: Option<bool>,
}

/// One test line: a context with a labeled candidate group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRecord {
    pub context: Vec<String>,
    pub last_utterance: String,
    pub candidates: Vec<String>,
    pub labels: Vec<u8>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Record {
            path: origin.to_string(),
            line: i + 1,
            message: format!("malformed record: {e}"),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    fs::write(path, to_jsonl(records)?).map_err(|e| Error::io(path, e))
}
