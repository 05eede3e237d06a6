//! The source databases as seen by a transform that has no cache: every
//! lookup is a query through one shared connection.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use nrtetl_core::record::ChangeRecord;
use nrtetl_core::table::TableConfig;
use nrtetl_core::value::Row;

use crate::cdc_log::{read_log, LogError};
use crate::workload::replay_tables;

struct Table {
    keyed: bool,
    by_key: BTreeMap<String, Vec<Row>>,
    all: Vec<Row>,
}

pub struct SourceStore {
    tables: BTreeMap<String, Table>,
    connection: Mutex<()>,
    latency: Duration,
    queries: AtomicU64,
}

impl SourceStore {
    /// Master tables as they stand after replaying `records`.
    pub fn from_records(records: &[ChangeRecord], configs: &[TableConfig], latency: Duration) -> Self {
        let state = replay_tables(records, configs);
        let mut tables = BTreeMap::new();
        for cfg in configs.iter().filter(|c| c.nature == nrtetl_core::table::TableNature::Master) {
            let mut t = Table {
                keyed: cfg.has_business_key(),
                by_key: BTreeMap::new(),
                all: Vec::new(),
            };
            for row in state[&cfg.table].values() {
                if t.keyed {
                    if let Some(k) = cfg.business_key_of(row) {
                        t.by_key.entry(k).or_default().push(row.clone());
                    }
                } else {
                    t.all.push(row.clone());
                }
            }
            tables.insert(cfg.table.clone(), t);
        }
        SourceStore {
            tables,
            connection: Mutex::new(()),
            latency,
            queries: AtomicU64::new(0),
        }
    }

    pub fn open(log_dir: impl AsRef<Path>, configs: &[TableConfig], latency: Duration) -> Result<Self, LogError> {
        Ok(Self::from_records(&read_log(log_dir, configs)?, configs, latency))
    }

    /// Rows of `table` for `business_key`; lookup tables return every row.
    pub fn query(&self, table: &str, business_key: &str) -> Vec<Row> {
        let _conn = self.connection.lock().unwrap();
        self.queries.fetch_add(1, Ordering::Relaxed);
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        match self.tables.get(table) {
            Some(t) if t.keyed => t.by_key.get(business_key).cloned().unwrap_or_default(),
            Some(t) => t.all.clone(),
            None => Vec::new(),
        }
    }

    pub fn tables(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nrtetl_core::record::Op;
    use nrtetl_core::schema::{simple, Preset};
    use nrtetl_core::value::{row, Scalar};

    #[test]
    fn queries_final_state() {
        let cfgs = Preset::Simple.table_configs(4);
        let mk = |id: i64, eq: &str, st: &str| {
            row([
                ("id", Scalar::Int(id)),
                ("equip_id", eq.into()),
                ("status", st.into()),
                ("ts", Scalar::Int(id)),
            ])
        };
        let mut recs = vec![
            ChangeRecord::new(simple::STATUS, Op::Insert, 1, mk(1, "E1", "ON")),
            ChangeRecord::new(simple::STATUS, Op::Insert, 2, mk(2, "E2", "ON")),
            ChangeRecord::new(simple::STATUS, Op::Update, 3, mk(1, "E1", "OFF")),
        ];
        for r in &mut recs {
            r.validate("id").unwrap();
        }
        let s = SourceStore::from_records(&recs, &cfgs, Duration::ZERO);
        let e1 = s.query(simple::STATUS, "E1");
        assert_eq!(e1.len(), 1);
        assert_eq!(e1[0]["status"], Scalar::from("OFF"));
        assert!(s.query(simple::QUALITY, "E1").is_empty());
        assert_eq!(s.queries(), 2);
    }
}
