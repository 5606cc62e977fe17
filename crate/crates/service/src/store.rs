//! Directory-per-run persistence with an append-only index.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::records::{now, RunRecord, RunStatus};

pub const RECORD_JSON: &str = "record.json";
pub const INDEX_FILE: &str = "index.jsonl";

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

/// Issues lexicographically sortable, strictly increasing ids.
#[derive(Debug)]
pub struct IdGen {
    prefix: &'static str,
    last: Mutex<(u64, u32)>,
}

impl IdGen {
    pub fn new(prefix: &'static str) -> Self {
        Self { prefix, last: Mutex::new((0, 0)) }
    }

    /// Makes sure future ids sort after `id`.
    pub fn observe(&self, id: &str) {
        let Some(rest) = id.strip_prefix(self.prefix) else { return };
        let Some((ms, seq)) = rest.split_once('-') else { return };
        if let (Ok(ms), Ok(seq)) = (ms.parse::<u64>(), seq.parse::<u32>()) {
            let mut last = self.last.lock().expect("id lock");
            if (ms, seq) > *last {
                *last = (ms, seq);
            }
        }
    }

    pub fn next(&self) -> String {
        let ms = chrono::Utc::now().timestamp_millis().max(0) as u64;
        let mut last = self.last.lock().expect("id lock");
        *last = if ms > last.0 { (ms, 0) } else { (last.0, last.1 + 1) };
        format!("{}{:013}-{:04}", self.prefix, last.0, last.1)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    id: String,
    created_at: String,
}

#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    records: RwLock<BTreeMap<String, RunRecord>>,
    index: Mutex<std::fs::File>,
    ids: IdGen,
}

impl RunStore {
    /// Opens the store under `root`, creating it if needed. Runs that were
    /// queued or running when the previous process stopped are marked
    /// failed with reason "interrupted".
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        let ids = IdGen::new("run-");
        let mut records = BTreeMap::new();
        let index_path = root.join(INDEX_FILE);
        if index_path.exists() {
            for line in std::fs::read_to_string(&index_path)?.lines().filter(|l| !l.trim().is_empty()) {
                let Ok(entry) = serde_json::from_str::<IndexLine>(line) else {
                    tracing::warn!(line, "skipping malformed index line");
                    continue;
                };
                let path = root.join(&entry.id).join(RECORD_JSON);
                let record = match std::fs::read_to_string(&path).map(|t| serde_json::from_str::<RunRecord>(&t)) {
                    Ok(Ok(r)) => r,
                    _ => {
                        tracing::warn!(id = entry.id, "run record missing or unreadable");
                        continue;
                    }
                };
                ids.observe(&record.id);
                records.insert(record.id.clone(), record);
            }
        }
        for record in records.values_mut() {
            if !record.status.is_terminal() {
                record.status = RunStatus::Failed;
                record.reason = Some("interrupted".into());
                record.progress = None;
                record.finished_at = Some(now());
                write_atomic(&root.join(&record.id).join(RECORD_JSON), &serde_json::to_vec_pretty(record)?)?;
            }
        }
        let index = std::fs::OpenOptions::new().create(true).append(true).open(&index_path)?;
        Ok(Self { root, records: RwLock::new(records), index: Mutex::new(index), ids })
    }

    pub fn next_id(&self) -> String {
        self.ids.next()
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn persist(&self, record: &RunRecord) -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(record)?;
        write_atomic(&self.run_dir(&record.id).join(RECORD_JSON), &bytes)
    }

    pub fn insert(&self, record: RunRecord) -> std::io::Result<()> {
        std::fs::create_dir_all(self.run_dir(&record.id))?;
        self.persist(&record)?;
        let line = serde_json::to_string(&IndexLine { id: record.id.clone(), created_at: record.created_at.clone() })?;
        {
            let mut index = self.index.lock().expect("index lock");
            writeln!(index, "{line}")?;
            index.flush()?;
        }
        self.records.write().expect("store lock").insert(record.id.clone(), record);
        Ok(())
    }

    /// Applies `change` to a record and persists it. Status changes that
    /// would move backwards are refused.
    pub fn update(&self, id: &str, change: impl FnOnce(&mut RunRecord)) -> std::io::Result<RunRecord> {
        let mut records = self.records.write().expect("store lock");
        let record = records
            .get_mut(id)
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, format!("run {id}")))?;
        let mut next = record.clone();
        change(&mut next);
        if next.status != record.status && !record.status.can_become(next.status) {
            return Err(std::io::Error::other(format!("run {id}: {} cannot become {}", record.status, next.status)));
        }
        if next.status != record.status || next.status.is_terminal() {
            self.persist(&next)?;
        }
        *record = next.clone();
        Ok(next)
    }

    /// In-memory progress update; not persisted.
    pub fn set_progress(&self, id: &str, progress: crate::records::Progress) {
        if let Some(r) = self.records.write().expect("store lock").get_mut(id) {
            if r.status == RunStatus::Running {
                r.progress = Some(progress);
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<RunRecord> {
        self.records.read().expect("store lock").get(id).cloned()
    }

    /// Records in id order, optionally restricted to some statuses.
    pub fn list(&self, statuses: &[RunStatus]) -> Vec<RunRecord> {
        self.records
            .read()
            .expect("store lock")
            .values()
            .filter(|r| statuses.is_empty() || statuses.contains(&r.status))
            .cloned()
            .collect()
    }

    pub fn count(&self, status: RunStatus) -> usize {
        self.records.read().expect("store lock").values().filter(|r| r.status == status).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_sort_in_issue_order() {
        let g = IdGen::new("run-");
        let ids: Vec<String> = (0..50).map(|_| g.next()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(ids, sorted);
        g.observe("run-9999999999999-0007");
        assert!(g.next() > "run-9999999999999-0007".to_string());
    }
}
