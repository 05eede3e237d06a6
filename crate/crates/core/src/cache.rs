//! Per-worker in-memory master tables, filtered to the business keys the
//! worker owns.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::hash::partition_for;
use crate::record::Op;
use crate::table::TableConfig;
use crate::value::Row;

/// Which business keys a worker keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyFilter {
    /// Keep every row. Used for lookup tables without a business key and by
    /// single-process consumers such as the batch oracle.
    All,
    /// Keep rows whose business key hashes into one of `assigned` among
    /// `partition_count` operational partitions.
    Partitions {
        partition_count: u32,
        assigned: BTreeSet<u32>,
    },
}

impl KeyFilter {
    pub fn partitions(partition_count: u32, assigned: impl IntoIterator<Item = u32>) -> Self {
        KeyFilter::Partitions {
            partition_count,
            assigned: assigned.into_iter().collect(),
        }
    }

    pub fn admits(&self, business_key: &str) -> bool {
        match self {
            KeyFilter::All => true,
            KeyFilter::Partitions {
                partition_count,
                assigned,
            } => assigned.contains(&partition_for(business_key, *partition_count)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedRow {
    pub row: Row,
    pub tx_ts: i64,
}

/// Outcome of applying one master change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Applied {
    /// The change was admitted. `business_key` is the key whose rows changed
    /// (the old key as well when an update moved a row between keys).
    Admitted { business_keys: Vec<String> },
    /// Filtered out, or a delete of a row this cache never held.
    Ignored,
}

/// One cached master table.
///
/// Rows are keyed by row key and indexed by business key, so a key's full
/// event history (for event-style tables such as equipment status) is the set
/// of rows carrying that business key.
#[derive(Debug, Clone)]
pub struct MasterCacheTable {
    config: TableConfig,
    filter: KeyFilter,
    rows: BTreeMap<String, CachedRow>,
    by_business: BTreeMap<String, BTreeSet<String>>,
    high_water_tx_ts: i64,
}

impl MasterCacheTable {
    pub fn new(config: TableConfig, filter: KeyFilter) -> Self {
        let filter = if config.has_business_key() {
            filter
        } else {
            KeyFilter::All
        };
        MasterCacheTable {
            config,
            filter,
            rows: BTreeMap::new(),
            by_business: BTreeMap::new(),
            high_water_tx_ts: 0,
        }
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    pub fn table(&self) -> &str {
        &self.config.table
    }

    pub fn filter(&self) -> &KeyFilter {
        &self.filter
    }

    pub fn high_water_tx_ts(&self) -> i64 {
        self.high_water_tx_ts
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Drops every row and installs a new filter.
    pub fn reset(&mut self, filter: KeyFilter) {
        self.rows.clear();
        self.by_business.clear();
        self.high_water_tx_ts = 0;
        if self.config.has_business_key() {
            self.filter = filter;
        }
    }

    /// Business keys currently present in the cache.
    pub fn filter_keys(&self) -> impl Iterator<Item = &str> {
        self.by_business.keys().map(String::as_str)
    }

    pub fn get(&self, row_key: &str) -> Option<&CachedRow> {
        self.rows.get(row_key)
    }

    /// Rows carrying `business_key`, in row-key order.
    pub fn rows_for(&self, business_key: &str) -> impl Iterator<Item = (&str, &CachedRow)> {
        self.by_business
            .get(business_key)
            .into_iter()
            .flatten()
            .filter_map(|k| self.rows.get(k).map(|r| (k.as_str(), r)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CachedRow)> {
        self.rows.iter().map(|(k, r)| (k.as_str(), r))
    }

    /// Upserts or deletes one row when its business key passes the filter.
    ///
    /// Deletes may carry only the row key; the business key is then taken
    /// from the cached row.
    pub fn apply(&mut self, op: Op, row_key: &str, row: &Row, tx_ts: i64) -> Applied {
        let existing_key = self
            .rows
            .get(row_key)
            .and_then(|r| self.config.business_key_of(&r.row));
        match op {
            Op::Delete => {
                if !self.rows.contains_key(row_key) {
                    return Applied::Ignored;
                }
                self.remove(row_key, existing_key.as_deref());
                self.bump(tx_ts);
                Applied::Admitted {
                    business_keys: existing_key.into_iter().collect(),
                }
            }
            Op::Insert | Op::Update => {
                let new_key = self.config.business_key_of(row);
                let admitted = match (&new_key, self.config.has_business_key()) {
                    (_, false) => true,
                    (Some(k), true) => self.filter.admits(k),
                    (None, true) => false,
                };
                if !admitted {
                    // A row that moved out of this worker's keys must leave.
                    if existing_key.is_some() {
                        self.remove(row_key, existing_key.as_deref());
                        self.bump(tx_ts);
                        return Applied::Admitted {
                            business_keys: existing_key.into_iter().collect(),
                        };
                    }
                    return Applied::Ignored;
                }
                if existing_key.is_some() && existing_key != new_key {
                    self.remove(row_key, existing_key.as_deref());
                }
                if let Some(k) = &new_key {
                    self.by_business
                        .entry(k.clone())
                        .or_default()
                        .insert(row_key.into());
                }
                self.rows.insert(
                    row_key.into(),
                    CachedRow {
                        row: row.clone(),
                        tx_ts,
                    },
                );
                self.bump(tx_ts);
                let mut keys: Vec<String> = existing_key.into_iter().collect();
                if let Some(k) = new_key {
                    if !keys.contains(&k) {
                        keys.push(k);
                    }
                }
                Applied::Admitted {
                    business_keys: keys,
                }
            }
        }
    }

    fn remove(&mut self, row_key: &str, business_key: Option<&str>) {
        self.rows.remove(row_key);
        if let Some(k) = business_key {
            if let Some(set) = self.by_business.get_mut(k) {
                set.remove(row_key);
                if set.is_empty() {
                    self.by_business.remove(k);
                }
            }
        }
    }

    fn bump(&mut self, tx_ts: i64) {
        self.high_water_tx_ts = self.high_water_tx_ts.max(tx_ts);
    }
}
