use std::io::Write;
use std::path::Path;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::calibration::UserLedger;

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    ledgers: Vec<UserLedger>,
}

/// Per-user ledgers. Each update runs under the user's shard lock, so
/// concurrent batches from one user never lose an increment.
#[derive(Debug, Default)]
pub struct LedgerStore {
    ledgers: DashMap<String, UserLedger>,
}

impl LedgerStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a batch to `user_id`'s ledger and evaluates `then` on the
    /// updated ledger before any other update to that user can run.
    pub fn record<R>(&self, user_id: &str, queries: u64, cost: f64, then: impl FnOnce(&UserLedger) -> R) -> R {
        let mut entry = self
            .ledgers
            .entry(user_id.to_owned())
            .or_insert_with(|| UserLedger::new(user_id));
        entry.record(queries, cost);
        then(&entry)
    }

    pub fn get(&self, user_id: &str) -> Option<UserLedger> {
        self.ledgers.get(user_id).map(|l| l.clone())
    }

    pub fn len(&self) -> usize {
        self.ledgers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ledgers.is_empty()
    }

    /// All ledgers sorted by user id.
    pub fn all(&self) -> Vec<UserLedger> {
        let mut all: Vec<UserLedger> = self.ledgers.iter().map(|l| l.clone()).collect();
        all.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        all
    }

    /// Writes a JSON snapshot next to `path` and renames it into place, so a
    /// crash mid-write never leaves a truncated file.
    pub fn snapshot(&self, path: &Path) -> Result<(), GatewayError> {
        let io = |e: std::io::Error| GatewayError::Snapshot {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        let snapshot = Snapshot {
            version: SNAPSHOT_VERSION,
            ledgers: self.all(),
        };
        serde_json::to_writer(&mut tmp, &snapshot).map_err(|e| io(e.into()))?;
        tmp.write_all(b"\n").map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    /// Loads a snapshot. A missing file is an error unless `empty_ok`.
    pub fn restore(path: &Path, empty_ok: bool) -> Result<Self, GatewayError> {
        let fail = |reason: String| GatewayError::Snapshot {
            path: path.display().to_string(),
            reason,
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && empty_ok => return Ok(Self::new()),
            Err(e) => return Err(fail(e.to_string())),
        };
        let snapshot: Snapshot = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(fail(format!("unsupported snapshot version {}", snapshot.version)));
        }
        let store = Self::new();
        for ledger in snapshot.ledgers {
            if !(ledger.cumulative_cost.is_finite() && ledger.cumulative_cost >= 0.0) {
                return Err(fail(format!("user {:?} has invalid cost", ledger.user_id)));
            }
            if store.ledgers.insert(ledger.user_id.clone(), ledger).is_some() {
                return Err(fail("duplicate user id".into()));
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> LedgerStore {
        let s = LedgerStore::new();
        s.record("alice", 10, 0.5, |_| ());
        s.record("bob", 3, 2.25, |_| ());
        s.record("alice", 5, 0.125, |_| ());
        s
    }

    #[test]
    fn record_accumulates() {
        let s = store();
        let a = s.get("alice").unwrap();
        assert_eq!((a.query_count, a.cumulative_cost), (15, 0.625));
        let seen = s.record("alice", 1, 1.0, |l| l.query_count);
        assert_eq!(seen, 16);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledgers.json");
        let s = store();
        s.snapshot(&path).unwrap();
        assert_eq!(LedgerStore::restore(&path, false).unwrap().all(), s.all());
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.json");
        assert!(LedgerStore::restore(&missing, true).unwrap().is_empty());
        assert!(LedgerStore::restore(&missing, false).is_err());

        let path = dir.path().join("ledgers.json");
        store().snapshot(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        let err = LedgerStore::restore(&path, true).unwrap_err();
        assert!(err.to_string().contains("ledgers.json"), "{err}");
    }

    #[test]
    fn concurrent_updates_are_serial() {
        let s = LedgerStore::new();
        std::thread::scope(|scope| {
            for _ in 0..8 {
                scope.spawn(|| {
                    for _ in 0..1000 {
                        s.record("eve", 1, 0.25, |_| ());
                    }
                });
            }
        });
        let l = s.get("eve").unwrap();
        assert_eq!((l.query_count, l.cumulative_cost), (8000, 2000.0));
    }
}
