//! Embedded fact table with idempotent upserts and a canonical dump.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use nrtetl_core::fact::{FactKind, FactRow};

pub const DEFAULT_BATCH_SIZE: usize = 500;

#[derive(Default)]
struct Tables {
    facts: BTreeMap<u64, FactRow>,
    by_bucket: BTreeMap<(String, i64), BTreeSet<u64>>,
}

impl Tables {
    fn upsert(&mut self, row: FactRow) -> bool {
        let id = row.fact_id;
        if let Some(old) = self.facts.get(&id) {
            if *old == row {
                return false;
            }
            if (old.equip.as_str(), old.bucket) != (row.equip.as_str(), row.bucket) {
                let k = (old.equip.clone(), old.bucket);
                self.unindex(&k, id);
            }
        }
        self.by_bucket
            .entry((row.equip.clone(), row.bucket))
            .or_default()
            .insert(id);
        self.facts.insert(id, row);
        true
    }

    fn unindex(&mut self, k: &(String, i64), id: u64) {
        if let Some(set) = self.by_bucket.get_mut(k) {
            set.remove(&id);
            if set.is_empty() {
                self.by_bucket.remove(k);
            }
        }
    }

    fn delete(&mut self, id: u64) -> bool {
        match self.facts.remove(&id) {
            Some(old) => {
                self.unindex(&(old.equip, old.bucket), id);
                true
            }
            None => false,
        }
    }
}

/// What one load call changed.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LoadStats {
    pub upserted: usize,
    pub deleted: usize,
}

/// The fact table. Safe for concurrent loaders; each business key is only
/// ever written by the worker that owns its partition.
pub struct TargetStore {
    tables: Mutex<Tables>,
    batch_size: usize,
    statements: AtomicU64,
}

impl Default for TargetStore {
    fn default() -> Self {
        TargetStore::new(DEFAULT_BATCH_SIZE)
    }
}

impl TargetStore {
    pub fn new(batch_size: usize) -> Self {
        TargetStore {
            tables: Mutex::new(Tables::default()),
            batch_size: batch_size.max(1),
            statements: AtomicU64::new(0),
        }
    }

    /// Upserts rows keyed by `fact_id`, `batch_size` rows per lock.
    /// Returns how many rows were new or changed.
    pub fn load(&self, rows: &[FactRow], _partition: u32) -> usize {
        let mut applied = 0;
        for chunk in rows.chunks(self.batch_size) {
            let mut t = self.tables.lock().unwrap();
            for r in chunk {
                applied += usize::from(t.upsert(r.clone()));
            }
            self.statements.fetch_add(chunk.len() as u64, Ordering::Relaxed);
        }
        applied
    }

    /// Makes `rows` the complete content of window `bucket` of `equip`:
    /// upserts them and deletes any other fact stored for that window.
    pub fn replace_bucket(&self, equip: &str, bucket: i64, rows: Vec<FactRow>) -> LoadStats {
        let mut stats = LoadStats::default();
        let keep: BTreeSet<u64> = rows.iter().map(|r| r.fact_id).collect();
        let mut t = self.tables.lock().unwrap();
        let stale: Vec<u64> = t
            .by_bucket
            .get(&(equip.to_string(), bucket))
            .map(|ids| ids.difference(&keep).copied().collect())
            .unwrap_or_default();
        for id in stale {
            stats.deleted += usize::from(t.delete(id));
        }
        for r in rows {
            stats.upserted += usize::from(t.upsert(r));
        }
        self.statements
            .fetch_add((stats.deleted + keep.len()) as u64, Ordering::Relaxed);
        stats
    }

    /// Makes `rows` the complete content of every window of `equip`.
    pub fn replace_key(&self, equip: &str, rows: Vec<FactRow>) -> LoadStats {
        let mut stats = LoadStats::default();
        let keep: BTreeSet<u64> = rows.iter().map(|r| r.fact_id).collect();
        let mut t = self.tables.lock().unwrap();
        let stale: Vec<u64> = t
            .by_bucket
            .range((equip.to_string(), i64::MIN)..=(equip.to_string(), i64::MAX))
            .flat_map(|(_, ids)| ids.iter().copied())
            .filter(|id| !keep.contains(id))
            .collect();
        for id in stale {
            stats.deleted += usize::from(t.delete(id));
        }
        for r in rows {
            stats.upserted += usize::from(t.upsert(r));
        }
        stats
    }

    pub fn len(&self) -> usize {
        self.tables.lock().unwrap().facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, fact_id: u64) -> Option<FactRow> {
        self.tables.lock().unwrap().facts.get(&fact_id).cloned()
    }

    /// Row statements issued so far.
    pub fn statements(&self) -> u64 {
        self.statements.load(Ordering::Relaxed)
    }

    /// The canonical dump: one line per fact, sorted by `fact_id`.
    pub fn export(&self) -> Vec<String> {
        let t = self.tables.lock().unwrap();
        t.facts.values().map(FactRow::dump_line).collect()
    }

    pub fn export_to(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, dump_text(&self.export()))
    }

    /// Checks the secondary index against the facts and that no two grains
    /// of one equipment overlap.
    pub fn integrity_scan(&self) -> Result<(), String> {
        let t = self.tables.lock().unwrap();
        let indexed: usize = t.by_bucket.values().map(BTreeSet::len).sum();
        if indexed != t.facts.len() {
            return Err(format!("{indexed} indexed ids for {} facts", t.facts.len()));
        }
        for ((equip, bucket), ids) in &t.by_bucket {
            for id in ids {
                match t.facts.get(id) {
                    Some(r) if &r.equip == equip && r.bucket == *bucket => {}
                    _ => return Err(format!("index entry {id:016x} does not match its fact")),
                }
            }
        }
        let mut grains: BTreeMap<&str, Vec<(i64, i64)>> = BTreeMap::new();
        for r in t.facts.values() {
            if r.kind != FactKind::Window {
                grains.entry(&r.equip).or_default().push((r.start_ts, r.end_ts));
            }
        }
        for (equip, mut spans) in grains {
            spans.sort_unstable();
            for w in spans.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(format!("{equip}: grains {:?} and {:?} overlap", w[0], w[1]));
                }
            }
        }
        Ok(())
    }
}

/// Dump lines as file content; an empty dump is an empty file.
pub fn dump_text(lines: &[String]) -> String {
    let mut s = String::with_capacity(lines.len() * 96);
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s
}

/// Canonical dump of an arbitrary row set.
pub fn dump_rows(rows: &[FactRow]) -> Vec<String> {
    let mut sorted: Vec<&FactRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.fact_id);
    sorted.iter().map(|r| r.dump_line()).collect()
}
