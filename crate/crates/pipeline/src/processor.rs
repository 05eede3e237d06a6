//! The stream processor worker.
//!
//! A worker owns a set of operational partitions. It keeps every master
//! table in memory, filtered to the business keys of those partitions, and
//! joins each operational record against it. Records whose master data has
//! not arrived yet wait in a buffer held in the broker's shared store.
//!
//! Per business key the worker keeps the accepted operational rows and the
//! last resolved timeline. Whenever either side changes, the key is
//! re-resolved and only the windows whose facts may differ are rewritten.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use nrtetl_core::assign::TopicPartition;
use nrtetl_core::buffer::{due_for_retry, partition_buffer_prefix, LateBufferEntry, MessageId};
use nrtetl_core::cache::{Applied, KeyFilter, MasterCacheTable};
use nrtetl_core::fact::{FactKind, FactRow};
use nrtetl_core::record::{ChangeRecord, Op};
use nrtetl_core::schema::{KeyData, Missing, Preset};
use nrtetl_core::table::{TableConfig, TableNature};
use nrtetl_core::timeline::{dirty_windows, window_at, KeyTimeline};
use nrtetl_core::value::Row;
use serde::{Deserialize, Serialize};

use crate::broker::{Assignment, Broker, BrokerError, Message, Poll};
use crate::cost::{CostModel, NodeCost};
use crate::metrics::{Collector, Stage};
use crate::producer::DeadLetterSink;
use crate::source::SourceStore;
use crate::uploader::TargetStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    /// Master data from the in-memory cache.
    Cached,
    /// Master data queried from the source store for every lookup.
    Lookback,
}

pub const DEFAULT_RETRY_CAP: u32 = 1_000;
pub const DEFAULT_SWEEP_INTERVAL: Duration = Duration::from_millis(500);

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub id: String,
    /// Node number used in metrics.
    pub index: u32,
    pub group: String,
    pub preset: Preset,
    pub op_partitions: u32,
    pub window_ms: i64,
    pub batch: usize,
    pub mode: Mode,
    pub cost: CostModel,
    pub sweep_interval: Duration,
    pub retry_cap: u32,
}

impl WorkerConfig {
    pub fn new(id: impl Into<String>, preset: Preset, op_partitions: u32) -> Self {
        WorkerConfig {
            id: id.into(),
            index: 0,
            group: "etl".into(),
            preset,
            op_partitions,
            window_ms: 3_600_000,
            batch: 500,
            mode: Mode::Cached,
            cost: CostModel::free(),
            sweep_interval: DEFAULT_SWEEP_INTERVAL,
            retry_cap: DEFAULT_RETRY_CAP,
        }
    }
}

/// Everything a worker shares with the rest of the pipeline.
#[derive(Clone)]
pub struct WorkerContext {
    pub broker: Arc<Broker>,
    pub target: Arc<TargetStore>,
    pub dead: Arc<DeadLetterSink>,
    pub metrics: Arc<Collector>,
    /// Required in lookback mode.
    pub source: Option<Arc<SourceStore>>,
}

/// Gauges the harness reads while the worker runs.
#[derive(Debug, Default)]
pub struct WorkerStatus {
    pub processed: AtomicU64,
    pub buffered: AtomicU64,
    pub buffer_peak: AtomicU64,
    pub dead_letters: AtomicU64,
    pub ready: AtomicBool,
    /// Set when the last loop round found no work.
    pub idle: AtomicBool,
    pub master_lag: AtomicU64,
    pub bootstraps: AtomicU64,
    pub last_bootstrap_us: AtomicU64,
    pub bootstrap_total_us: AtomicU64,
    /// Collector time of the first processed record, plus one; zero if none.
    pub first_processed_us: AtomicU64,
}

#[derive(Debug, Default)]
pub struct WorkerControl {
    /// Graceful stop: finish the round, leave the group.
    pub stop: AtomicBool,
    /// Crash: stop at the next check without cleaning up.
    pub kill: AtomicBool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Processed,
    Buffered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformResult {
    pub id: MessageId,
    pub disposition: Disposition,
    /// Grain facts written for this record's key by this call.
    pub grains: Vec<FactRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProcessorError {
    #[error("worker `{0}` is not ready")]
    NotReady(String),
    #[error("lookback mode needs a source store")]
    NoSource,
    #[error("poison message {id:?}: {reason}")]
    Poison { id: MessageId, reason: String },
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerExit {
    Stopped,
    Killed,
}

#[derive(Debug, Default)]
struct KeyState {
    /// Operational rows by row key with the sequence number that set them;
    /// `None` marks a delete.
    ops: BTreeMap<String, (u64, Option<Row>)>,
    timeline: Option<KeyTimeline>,
}

struct Buffered {
    entry: LateBufferEntry,
    /// Change clock at the last attempt.
    seen: u64,
}

fn wall_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as i64)
}

fn dead_marker(buffer_key: &str) -> String {
    format!("dead/{buffer_key}")
}

/// Decodes a message payload and fills in its row key.
pub fn decode(payload: &str, row_key_column: &str) -> Result<ChangeRecord, String> {
    let mut rec: ChangeRecord = serde_json::from_str(payload).map_err(|e| e.to_string())?;
    rec.validate(row_key_column).map_err(|e| e.to_string())?;
    Ok(rec)
}

fn msg_id(m: &Message) -> MessageId {
    MessageId {
        topic: m.topic.clone(),
        partition: m.partition,
        offset: m.offset,
    }
}

pub struct Worker {
    cfg: WorkerConfig,
    ctx: WorkerContext,
    status: Arc<WorkerStatus>,
    cost: NodeCost,
    op_cfg: TableConfig,
    caches: BTreeMap<String, MasterCacheTable>,
    master_pos: BTreeMap<String, Vec<u64>>,
    assigned: BTreeSet<u32>,
    generation: Option<u64>,
    ready: bool,
    keys: BTreeMap<String, KeyState>,
    dirty: BTreeSet<String>,
    buffer: BTreeMap<String, Buffered>,
    dead_ids: BTreeSet<String>,
    clock: u64,
    key_changed: BTreeMap<String, u64>,
    lookup_changed: u64,
    last_sweep: Instant,
    dead_letters: u64,
    listener: Option<Receiver<Assignment>>,
}

enum Incoming {
    Master(ChangeRecord),
    Op(Arc<Message>, ChangeRecord),
}

impl Worker {
    pub fn new(cfg: WorkerConfig, ctx: WorkerContext) -> Result<Self, ProcessorError> {
        if cfg.mode == Mode::Lookback && ctx.source.is_none() {
            return Err(ProcessorError::NoSource);
        }
        let tables = cfg.preset.table_configs(cfg.op_partitions);
        let op_cfg = tables
            .iter()
            .find(|t| t.nature == TableNature::Operational)
            .cloned()
            .expect("every preset has an operational table");
        let filter = KeyFilter::partitions(cfg.op_partitions, []);
        let caches = tables
            .into_iter()
            .filter(|t| t.nature == TableNature::Master)
            .map(|t| (t.table.clone(), MasterCacheTable::new(t, filter.clone())))
            .collect();
        Ok(Worker {
            cost: NodeCost::new(cfg.cost),
            cfg,
            ctx,
            status: Arc::new(WorkerStatus::default()),
            op_cfg,
            caches,
            master_pos: BTreeMap::new(),
            assigned: BTreeSet::new(),
            generation: None,
            ready: false,
            keys: BTreeMap::new(),
            dirty: BTreeSet::new(),
            buffer: BTreeMap::new(),
            dead_ids: BTreeSet::new(),
            clock: 0,
            key_changed: BTreeMap::new(),
            lookup_changed: 0,
            last_sweep: Instant::now(),
            dead_letters: 0,
            listener: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.cfg.id
    }

    pub fn status(&self) -> Arc<WorkerStatus> {
        self.status.clone()
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub fn op_topic(&self) -> &str {
        &self.op_cfg.table
    }

    /// Joins the consumer group of the operational topic.
    pub fn join(&mut self) -> Result<(), ProcessorError> {
        let topic = self.op_cfg.table.clone();
        self.ctx.broker.join(&self.cfg.group, &self.cfg.id, &[&topic])?;
        self.listener = Some(self.ctx.broker.rebalance_listener(&self.cfg.group, &self.cfg.id)?);
        Ok(())
    }

    pub fn leave(&mut self) -> Result<(), ProcessorError> {
        self.ready = false;
        self.status.ready.store(false, Ordering::Relaxed);
        self.ctx.broker.leave(&self.cfg.group, &self.cfg.id)?;
        Ok(())
    }

    pub fn assigned_partitions(&self) -> &BTreeSet<u32> {
        &self.assigned
    }

    pub fn cache(&self, table: &str) -> Option<&MasterCacheTable> {
        self.caches.get(table)
    }

    /// Business keys present in any keyed cache table.
    pub fn cached_keys(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for c in self.caches.values() {
            for (_, r) in c.iter() {
                if let Some(k) = c.config().business_key_of(&r.row) {
                    out.insert(k);
                }
            }
        }
        out
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn dirty_len(&self) -> usize {
        self.dirty.len()
    }

    /// Newest master transaction seen; unbounded in lookback mode, where
    /// the source always holds everything.
    pub fn high_water(&self) -> i64 {
        match self.cfg.mode {
            Mode::Cached => self
                .caches
                .values()
                .map(MasterCacheTable::high_water_tx_ts)
                .max()
                .unwrap_or(0),
            Mode::Lookback => i64::MAX,
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn mark_dirty(&mut self, key: &str) {
        self.dirty.insert(key.to_string());
        self.keys.entry(key.to_string()).or_default();
    }

    fn dead_letter(&mut self, payload: &str, error: &str) {
        self.ctx.dead.write_json(payload, error);
        self.dead_letters += 1;
        self.status.dead_letters.store(self.dead_letters, Ordering::Relaxed);
    }

    fn sync_buffer_gauge(&self) {
        let n = self.buffer.len() as u64;
        self.status.buffered.store(n, Ordering::Relaxed);
        self.status.buffer_peak.fetch_max(n, Ordering::Relaxed);
    }

    /// Applies one master change to the cache and marks affected keys.
    pub fn cache_apply_record(&mut self, rec: &ChangeRecord) -> Applied {
        let Some(cache) = self.caches.get_mut(&rec.table) else {
            return Applied::Ignored;
        };
        let Some(rk) = rec.row_key.canonical_key() else {
            return Applied::Ignored;
        };
        let applied = cache.apply(rec.op, &rk, &rec.row, rec.tx_ts);
        let keyed = cache.config().has_business_key();
        if let Applied::Admitted { business_keys } = &applied {
            let now = self.tick();
            if keyed {
                for k in business_keys {
                    self.key_changed.insert(k.clone(), now);
                    self.mark_dirty(k);
                }
            } else {
                self.lookup_changed = now;
                let all: Vec<String> = self.keys.keys().cloned().collect();
                self.dirty.extend(all);
            }
        }
        applied
    }

    /// Applies a master-topic message.
    pub fn cache_apply(&mut self, msg: &Message) -> Result<Applied, ProcessorError> {
        let col = match self.caches.get(&msg.topic) {
            Some(c) => c.config().row_key_column.clone(),
            None => return Ok(Applied::Ignored),
        };
        match decode(&msg.payload, &col) {
            Ok(rec) => Ok(self.cache_apply_record(&rec)),
            Err(reason) => {
                self.dead_letter(&msg.payload, &reason);
                Err(ProcessorError::Poison { id: msg_id(msg), reason })
            }
        }
    }

    /// Runs `f` over the master data visible for `key`.
    fn with_key_data<R>(&self, key: &str, f: impl FnOnce(&KeyData<'_>) -> R) -> R {
        match self.cfg.mode {
            Mode::Cached => {
                let mut data = KeyData::new();
                for (name, c) in &self.caches {
                    let rows: Vec<&Row> = if c.config().has_business_key() {
                        c.rows_for(key).map(|(_, r)| &r.row).collect()
                    } else {
                        c.iter().map(|(_, r)| &r.row).collect()
                    };
                    data.insert(name, rows);
                }
                f(&data)
            }
            Mode::Lookback => {
                let source = self.ctx.source.as_ref().expect("checked at construction");
                let fetched: Vec<(&str, Vec<Row>)> = self
                    .caches
                    .keys()
                    .map(|t| (t.as_str(), source.query(t, key)))
                    .collect();
                let mut data = KeyData::new();
                for (t, rows) in &fetched {
                    data.insert(t, rows.iter().collect());
                }
                f(&data)
            }
        }
    }

    fn gate(&mut self, key: &str, row: &Row) -> Result<(), Missing> {
        let preset = self.cfg.preset;
        let r = self.with_key_data(key, |d| preset.gate(key, d, row));
        match r {
            Ok(probes) => {
                self.cost.probes(probes);
                Ok(())
            }
            Err(m) => {
                self.cost.probes(1);
                Err(m)
            }
        }
    }

    /// Records an accepted operational change; older changes of the same row
    /// never overwrite newer ones.
    fn accept_op(&mut self, key: &str, rec: &ChangeRecord) {
        let rk = rec.row_key.canonical_key().unwrap_or_default();
        let st = self.keys.entry(key.to_string()).or_default();
        let newer = st.ops.get(&rk).is_none_or(|(seq, _)| rec.seq >= *seq);
        if newer {
            let row = (rec.op != Op::Delete).then(|| rec.row.clone());
            st.ops.insert(rk, (rec.seq, row));
        }
        self.dirty.insert(key.to_string());
    }

    fn count_processed(&self, n: u64) {
        if n == 0 {
            return;
        }
        if self.status.processed.fetch_add(n, Ordering::Relaxed) == 0 {
            let _ = self.status.first_processed_us.compare_exchange(
                0,
                self.ctx.metrics.now_us() + 1,
                Ordering::Relaxed,
                Ordering::Relaxed,
            );
        }
    }

    /// Validates an operational record and finds its business key.
    fn classify(&self, payload: &str) -> Result<(ChangeRecord, String), String> {
        let rec = decode(payload, &self.op_cfg.row_key_column)?;
        if rec.table != self.op_cfg.table {
            return Err(format!("record of `{}` on topic `{}`", rec.table, self.op_cfg.table));
        }
        let key = self
            .op_cfg
            .business_key_of(&rec.row)
            .ok_or_else(|| format!("missing business key `{}`", self.op_cfg.business_key_column))?;
        if rec.op != Op::Delete {
            self.cfg.preset.check_operational(&rec.row)?;
        }
        Ok((rec, key))
    }

    /// Joins one operational record against master data without writing
    /// facts; returns whether it was accepted or buffered.
    fn admit(&mut self, msg: &Message, rec: ChangeRecord, key: String) -> Result<Disposition, ProcessorError> {
        self.cost.records(1);
        let id = msg_id(msg);
        let bkey = id.buffer_key();
        if self.buffer.contains_key(&bkey) {
            return Ok(Disposition::Buffered);
        }
        if rec.op == Op::Delete {
            self.accept_op(&key, &rec);
            self.count_processed(1);
            return Ok(Disposition::Processed);
        }
        match self.gate(&key, &rec.row) {
            Ok(()) => {
                self.accept_op(&key, &rec);
                self.count_processed(1);
                Ok(Disposition::Processed)
            }
            Err(reason) => {
                let entry = LateBufferEntry {
                    business_key: key,
                    id,
                    record: rec,
                    reason,
                    enqueue_ts: wall_ms(),
                    attempt_count: 1,
                };
                self.ctx
                    .broker
                    .put_shared(&bkey, &serde_json::to_string(&entry).expect("entries serialize"))?;
                let seen = self.clock;
                self.buffer.insert(bkey, Buffered { entry, seen });
                self.sync_buffer_gauge();
                Ok(Disposition::Buffered)
            }
        }
    }

    /// Transforms one operational message and writes the facts of its key.
    pub fn transform(&mut self, msg: &Message) -> Result<TransformResult, ProcessorError> {
        if !self.ready {
            return Err(ProcessorError::NotReady(self.cfg.id.clone()));
        }
        let (rec, key) = match self.classify(&msg.payload) {
            Ok(v) => v,
            Err(reason) => {
                self.dead_letter(&msg.payload, &reason);
                return Err(ProcessorError::Poison { id: msg_id(msg), reason });
            }
        };
        let disposition = self.admit(msg, rec, key.clone())?;
        let grains = match disposition {
            Disposition::Processed => {
                self.dirty.remove(&key);
                self.flush_key(&key)
                    .into_iter()
                    .filter(|r| r.kind != FactKind::Window)
                    .collect()
            }
            Disposition::Buffered => Vec::new(),
        };
        Ok(TransformResult {
            id: msg_id(msg),
            disposition,
            grains,
        })
    }

    /// Retries buffered records that may have become processable. Returns
    /// how many left the buffer as processed.
    pub fn buffer_sweep(&mut self) -> usize {
        self.last_sweep = Instant::now();
        if self.buffer.is_empty() {
            return 0;
        }
        let hw = self.high_water();
        let mut done = 0;
        let keys: Vec<String> = self.buffer.keys().cloned().collect();
        for bkey in keys {
            let b = &self.buffer[&bkey];
            if !due_for_retry(b.entry.record.tx_ts, hw) {
                continue;
            }
            let changed = self
                .key_changed
                .get(&b.entry.business_key)
                .is_some_and(|&t| t > b.seen)
                || self.lookup_changed > b.seen
                || b.seen == 0;
            // Nothing the record could be waiting for has changed since the
            // last attempt, so it would fail again.
            if !changed {
                continue;
            }
            let key = b.entry.business_key.clone();
            let row = b.entry.record.row.clone();
            let now = self.clock;
            match self.gate(&key, &row) {
                Ok(()) => {
                    let b = self.buffer.remove(&bkey).unwrap();
                    self.accept_op(&key, &b.entry.record);
                    self.count_processed(1);
                    // The local copy is authoritative while this worker owns
                    // the partition; a failed delete is retried at shutdown.
                    let _ = self.ctx.broker.delete_shared(&bkey);
                    done += 1;
                }
                Err(reason) => {
                    let cap = self.cfg.retry_cap;
                    let b = self.buffer.get_mut(&bkey).unwrap();
                    b.seen = now.max(1);
                    b.entry.attempt_count += 1;
                    b.entry.reason = reason;
                    if b.entry.attempt_count >= cap {
                        let b = self.buffer.remove(&bkey).unwrap();
                        let payload = serde_json::to_string(&b.entry.record).unwrap();
                        self.dead_letter(
                            &payload,
                            &format!("still missing {} after {} attempts", b.entry.reason, b.entry.attempt_count),
                        );
                        let _ = self.ctx.broker.put_shared(&dead_marker(&bkey), "1");
                        let _ = self.ctx.broker.delete_shared(&bkey);
                        self.dead_ids.insert(bkey);
                    } else {
                        let json = serde_json::to_string(&b.entry).unwrap();
                        let _ = self.ctx.broker.put_shared(&bkey, &json);
                    }
                }
            }
        }
        self.sync_buffer_gauge();
        done
    }

    fn resolve(&mut self, key: &str) -> KeyTimeline {
        let preset = self.cfg.preset;
        let st = self.keys.get(key);
        let ops: Vec<&Row> = st
            .map(|s| s.ops.values().filter_map(|(_, r)| r.as_ref()).collect())
            .unwrap_or_default();
        let resolved = self.with_key_data(key, |d| preset.resolve(key, d, &ops));
        self.cost.probes(resolved.probes);
        resolved.timeline
    }

    /// Re-resolves `key` and rewrites the windows that changed. Returns the
    /// rows written.
    fn flush_key(&mut self, key: &str) -> Vec<FactRow> {
        let width = self.cfg.window_ms;
        let new = self.resolve(key);
        let st = self.keys.entry(key.to_string()).or_default();
        let windows: BTreeSet<i64> = match &st.timeline {
            Some(old) => dirty_windows(old, &new, width),
            None => new.window_indices(width).collect(),
        };
        let mut written = Vec::new();
        for w in windows {
            let facts = new
                .window_facts(w, width)
                .map(|f| f.rows)
                .unwrap_or_else(|e| {
                    log::error!("{key}: window {w}: {e}");
                    Vec::new()
                });
            written.extend(facts.iter().cloned());
            self.ctx
                .target
                .replace_bucket(key, window_at(w, width).start, facts);
        }
        st.timeline = Some(new);
        written
    }

    fn flush_dirty(&mut self) -> usize {
        let dirty = std::mem::take(&mut self.dirty);
        let n = dirty.len();
        for k in dirty {
            self.flush_key(&k);
        }
        n
    }

    /// Rebuilds all state for a new assignment. Returns false when killed
    /// part way.
    pub fn cache_bootstrap(&mut self, a: &Assignment, kill: &AtomicBool) -> Result<bool, ProcessorError> {
        let started = Instant::now();
        self.ready = false;
        self.status.ready.store(false, Ordering::Relaxed);
        let topic = self.op_cfg.table.clone();
        self.assigned = a
            .partitions
            .iter()
            .filter(|tp| tp.topic == topic)
            .map(|tp| tp.partition)
            .collect();
        self.generation = Some(a.generation);
        let filter = KeyFilter::partitions(self.cfg.op_partitions, self.assigned.iter().copied());
        for c in self.caches.values_mut() {
            c.reset(filter.clone());
        }
        self.keys.clear();
        self.dirty.clear();
        self.buffer.clear();
        self.dead_ids.clear();
        self.key_changed.clear();
        self.master_pos.clear();

        if self.cfg.mode == Mode::Cached {
            let tables: Vec<(String, String)> = self
                .caches
                .values()
                .map(|c| (c.table().to_string(), c.config().row_key_column.clone()))
                .collect();
            for (t, col) in tables {
                let (snap, ends) = self.ctx.broker.snapshot_with_offsets(&t)?;
                for (i, m) in snap.values().enumerate() {
                    if i % 256 == 0 && kill.load(Ordering::Relaxed) {
                        return Ok(false);
                    }
                    if let Ok(rec) = decode(&m.payload, &col) {
                        self.cache_apply_record(&rec);
                    }
                    self.cost.snapshot_rows(1);
                    self.cost.settle();
                }
                self.master_pos.insert(t, ends);
            }
        }

        for &p in &self.assigned {
            for (k, v) in self.ctx.broker.scan_shared(&partition_buffer_prefix(&topic, p)) {
                match serde_json::from_str::<LateBufferEntry>(&v) {
                    Ok(mut entry) => {
                        if entry.record.validate(&self.op_cfg.row_key_column).is_ok() {
                            self.buffer.insert(k, Buffered { entry, seen: 0 });
                        }
                    }
                    Err(e) => log::warn!("{k}: unreadable buffer entry: {e}"),
                }
            }
            let dead_prefix = dead_marker(&partition_buffer_prefix(&topic, p));
            for (k, _) in self.ctx.broker.scan_shared(&dead_prefix) {
                self.dead_ids.insert(k["dead/".len()..].to_string());
            }
        }
        self.sync_buffer_gauge();

        // Operational rows accepted by earlier owners.
        for &p in &self.assigned.clone() {
            let tp = TopicPartition::new(topic.clone(), p);
            let end = self.ctx.broker.committed(&self.cfg.group, &tp);
            let mut pos = 0;
            while pos < end {
                if kill.load(Ordering::Relaxed) {
                    return Ok(false);
                }
                let msgs = self.ctx.broker.fetch(&topic, p, pos, (end - pos).min(1024) as usize)?;
                if msgs.is_empty() {
                    break;
                }
                for m in &msgs {
                    if m.offset >= end {
                        break;
                    }
                    let bkey = msg_id(m).buffer_key();
                    if self.buffer.contains_key(&bkey) || self.dead_ids.contains(&bkey) {
                        continue;
                    }
                    if let Ok((rec, key)) = self.classify(&m.payload) {
                        self.accept_op(&key, &rec);
                    }
                    self.cost.snapshot_rows(1);
                }
                pos = msgs.last().unwrap().offset + 1;
                self.cost.settle();
            }
        }

        // Every key this worker now owns is recomputed from scratch.
        let mut keys: BTreeSet<String> = self.keys.keys().cloned().collect();
        keys.extend(self.cached_keys());
        for k in &keys {
            if kill.load(Ordering::Relaxed) {
                return Ok(false);
            }
            let tl = self.resolve(k);
            let rows: Vec<FactRow> = tl
                .window_indices(self.cfg.window_ms)
                .flat_map(|w| {
                    tl.window_facts(w, self.cfg.window_ms)
                        .map(|f| f.rows)
                        .unwrap_or_default()
                })
                .collect();
            self.ctx.target.replace_key(k, rows);
            self.keys.entry(k.clone()).or_default().timeline = Some(tl);
            self.cost.settle();
        }
        self.dirty.clear();
        self.cost.pay();

        let us = started.elapsed().as_micros() as u64;
        self.status.bootstraps.fetch_add(1, Ordering::Relaxed);
        self.status.last_bootstrap_us.store(us, Ordering::Relaxed);
        self.status.bootstrap_total_us.fetch_add(us, Ordering::Relaxed);
        self.ready = true;
        self.status.ready.store(true, Ordering::Relaxed);
        self.last_sweep = Instant::now();
        Ok(true)
    }

    fn fetch_master(&mut self, max: usize) -> Result<Vec<(String, Arc<Message>)>, ProcessorError> {
        let mut out = Vec::new();
        let mut lag = 0;
        for (t, positions) in self.master_pos.iter_mut() {
            for (p, pos) in positions.iter_mut().enumerate() {
                let got = self.ctx.broker.fetch(t, p as u32, *pos, max)?;
                *pos += got.len() as u64;
                lag += self.ctx.broker.end_offset(t, p as u32)? - *pos;
                out.extend(got.into_iter().map(|m| (t.clone(), m)));
            }
        }
        self.status.master_lag.store(lag, Ordering::Relaxed);
        Ok(out)
    }

    /// Emits an event for records processed since `reported` and returns
    /// the new total.
    fn report(&self, reported: u64) -> u64 {
        let now = self.status.processed.load(Ordering::Relaxed);
        if now > reported {
            self.ctx.metrics.record(
                Stage::Worker,
                self.cfg.index,
                now - reported,
                self.buffer.len() as u64,
                self.dead_letters,
            );
        }
        now
    }

    /// One round of the worker loop. Returns `Ok(false)` when killed during
    /// a rebuild.
    pub fn step(&mut self, kill: &AtomicBool) -> Result<bool, ProcessorError> {
        let mut busy = false;
        if let Some(rx) = &self.listener {
            // Assignments also arrive through poll; drain the copies.
            while rx.try_recv().is_ok() {}
        }
        let ops = match self.ctx.broker.poll(&self.cfg.group, &self.cfg.id, self.cfg.batch)? {
            Poll::Rebalancing => {
                self.ready = false;
                self.status.ready.store(false, Ordering::Relaxed);
                self.status.idle.store(false, Ordering::Relaxed);
                thread::sleep(Duration::from_micros(200));
                return Ok(true);
            }
            Poll::Assigned(a) => {
                self.status.idle.store(false, Ordering::Relaxed);
                return self.cache_bootstrap(&a, kill);
            }
            Poll::Messages(m) => m,
        };
        let masters = if self.ready && self.cfg.mode == Mode::Cached {
            self.fetch_master(self.cfg.batch * 4)?
        } else {
            Vec::new()
        };

        let mut incoming = Vec::with_capacity(masters.len() + ops.len());
        for (t, m) in masters {
            let col = self.caches[&t].config().row_key_column.clone();
            match decode(&m.payload, &col) {
                Ok(rec) => incoming.push(Incoming::Master(rec)),
                Err(e) => self.dead_letter(&m.payload, &e),
            }
        }
        let mut next_offsets: BTreeMap<u32, u64> = BTreeMap::new();
        for m in ops {
            next_offsets.insert(m.partition, m.offset + 1);
            match self.classify(&m.payload) {
                Ok((rec, _)) => incoming.push(Incoming::Op(m, rec)),
                Err(e) => self.dead_letter(&m.payload, &e),
            }
        }
        incoming.sort_by_key(|i| match i {
            Incoming::Master(r) | Incoming::Op(_, r) => r.seq,
        });
        let mut reported = self.status.processed.load(Ordering::Relaxed);
        let mut changed = false;
        for (n, item) in incoming.into_iter().enumerate() {
            busy = true;
            if n % 64 == 0 {
                reported = self.report(reported);
                if kill.load(Ordering::Relaxed) {
                    return Ok(false);
                }
            }
            match item {
                Incoming::Master(rec) => {
                    changed |= matches!(self.cache_apply_record(&rec), Applied::Admitted { .. });
                }
                Incoming::Op(m, rec) => {
                    let key = self.op_cfg.business_key_of(&rec.row).unwrap_or_default();
                    if self.admit(&m, rec, key)? == Disposition::Processed {
                        changed = true;
                    }
                }
            }
            self.cost.settle();
        }
        if !self.buffer.is_empty()
            && (changed || self.last_sweep.elapsed() >= self.cfg.sweep_interval)
        {
            busy |= self.buffer_sweep() > 0;
        }
        if self.flush_dirty() > 0 {
            busy = true;
        }
        self.cost.settle();
        for (p, next) in next_offsets {
            let tp = TopicPartition::new(self.op_cfg.table.clone(), p);
            match self.ctx.broker.commit(&self.cfg.group, &self.cfg.id, &tp, next) {
                Ok(()) | Err(BrokerError::NotOwner { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if busy {
            let done = self.status.processed.load(Ordering::Relaxed) - reported;
            self.ctx.metrics.record(
                Stage::Worker,
                self.cfg.index,
                done,
                self.buffer.len() as u64,
                self.dead_letters,
            );
        }
        self.status.idle.store(!busy && self.dirty.is_empty(), Ordering::Relaxed);
        if !busy {
            self.cost.pay();
            thread::sleep(Duration::from_millis(1));
        }
        Ok(true)
    }

    /// The worker loop. A graceful stop leaves the group; a kill does not.
    pub fn run(mut self, control: &WorkerControl) -> Result<WorkerExit, ProcessorError> {
        if self.listener.is_none() {
            self.join()?;
        }
        loop {
            if control.kill.load(Ordering::Relaxed) {
                return Ok(WorkerExit::Killed);
            }
            if control.stop.load(Ordering::Relaxed) {
                self.leave()?;
                return Ok(WorkerExit::Stopped);
            }
            if !self.step(&control.kill)? {
                return Ok(WorkerExit::Killed);
            }
        }
    }
}
