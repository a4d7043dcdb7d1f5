//! Append-only JSON-lines record store for cached results. A cache hit
//! requires both the spec hash and the config hash to match; corrupt lines
//! are skipped with a warning.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(data: &str) -> String {
    let mut h = Sha256::new();
    h.update(data.as_bytes());
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub id: String,
    pub kind: String,
    pub spec_hash: String,
    pub config_hash: String,
    pub timestamp: u64,
    pub tool_version: String,
    pub result: serde_json::Value,
}

pub struct RecordStore {
    path: PathBuf,
    records: Vec<RunRecord>,
}

impl RecordStore {
    /// Loads `records.jsonl` under `dir` (creating nothing yet); corrupt
    /// lines are counted and reported on stderr.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        let path = dir.join("records.jsonl");
        let mut records = Vec::new();
        let mut corrupt = 0usize;
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<RunRecord>(line) {
                    Ok(r) => records.push(r),
                    Err(_) => corrupt += 1,
                }
            }
        }
        if corrupt > 0 {
            eprintln!(
                "warning: skipped {corrupt} corrupt record(s) in {}",
                path.display()
            );
        }
        Ok(RecordStore { path, records })
    }

    /// Newest record matching all three keys.
    pub fn lookup(&self, kind: &str, spec_hash: &str, config_hash: &str) -> Option<&RunRecord> {
        self.records
            .iter()
            .rev()
            .find(|r| r.kind == kind && r.spec_hash == spec_hash && r.config_hash == config_hash)
    }

    pub fn append(&mut self, record: RunRecord) -> std::io::Result<()> {
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(f, "{line}")?;
        self.records.push(record);
        Ok(())
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
