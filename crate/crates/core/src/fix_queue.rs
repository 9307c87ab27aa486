//! Prioritized remediation queue: line-delimited records emitted by the
//! grooming lane and consumed by fix workers sorted by priority_score
//! descending.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One queue entry. ticket_key carries the work item identity so a worker
/// can claim the right ticket; the remaining fields are the queue schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixQueueRecord {
    pub priority_score: f64,
    pub priority_type: String,
    pub relevant_paths: Vec<String>,
    pub area: String,
    pub confidence: f64,
    pub ticket_key: String,
}

#[derive(Debug, Error)]
pub enum FixQueueError {
    #[error("queue I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("queue line {line} is malformed: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
}

/// The on-disk queue. Append order is preserved in the file; consumers
/// always see priority order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixQueue {
    records: Vec<FixQueueRecord>,
}

impl FixQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, FixQueueError> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = fs::read_to_string(path).map_err(|source| FixQueueError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|source| {
                FixQueueError::Malformed {
                    line: i + 1,
                    source,
                }
            })?);
        }
        Ok(FixQueue { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), FixQueueError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| FixQueueError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn push(&mut self, record: FixQueueRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in consumption order: priority_score descending, ties broken
    /// by ticket_key so two runs dequeue identically.
    pub fn in_priority_order(&self) -> Vec<FixQueueRecord> {
        let mut sorted = self.records.clone();
        sorted.sort_by(|a, b| {
            b.priority_score
                .partial_cmp(&a.priority_score)
                .expect("priority scores are finite")
                .then_with(|| a.ticket_key.cmp(&b.ticket_key))
        });
        sorted
    }

    /// Remove a record once its ticket is claimed.
    pub fn remove(&mut self, ticket_key: &str) -> Option<FixQueueRecord> {
        let idx = self.records.iter().position(|r| r.ticket_key == ticket_key)?;
        Some(self.records.remove(idx))
    }
}
