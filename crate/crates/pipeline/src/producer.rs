//! The message producer: tails one table of the change log and publishes
//! every record to that table's topic.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use nrtetl_core::hash::fnv1a64;
use nrtetl_core::record::ChangeRecord;
use nrtetl_core::table::{TableConfig, TableNature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::broker::{Broker, BrokerError};
use crate::cdc_log::{load_checkpoint, save_checkpoint, CdcTailer, LogError};
use crate::metrics::{Collector, Stage};

/// Error log shared by producers and workers: the record's own JSON object
/// with an added `error` field, one per line.
pub struct DeadLetterSink {
    out: Mutex<Option<BufWriter<File>>>,
    kept: Mutex<Vec<String>>,
    count: AtomicU64,
}

impl DeadLetterSink {
    /// Keeps entries in memory only.
    pub fn memory() -> Self {
        DeadLetterSink {
            out: Mutex::new(None),
            kept: Mutex::new(Vec::new()),
            count: AtomicU64::new(0),
        }
    }

    /// Appends to `path` as well.
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let sink = Self::memory();
        *sink.out.lock().unwrap() = Some(BufWriter::new(f));
        Ok(sink)
    }

    /// `record` is a JSON object, usually an encoded [`ChangeRecord`].
    pub fn write_json(&self, record: &str, error: &str) {
        let mut v: serde_json::Value = serde_json::from_str(record)
            .unwrap_or_else(|_| serde_json::Value::String(record.to_string()));
        if !v.is_object() {
            v = serde_json::json!({ "payload": v });
        }
        v["error"] = serde_json::Value::String(error.to_string());
        let line = v.to_string();
        if let Some(w) = self.out.lock().unwrap().as_mut() {
            // A failing error log must not stop the pipeline.
            let _ = writeln!(w, "{line}").and_then(|_| w.flush());
        }
        self.kept.lock().unwrap().push(line);
        self.count.fetch_add(1, Ordering::Relaxed);
    }

    pub fn write(&self, record: &ChangeRecord, error: &str) {
        self.write_json(&serde_json::to_string(record).unwrap(), error);
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn entries(&self) -> Vec<String> {
        self.kept.lock().unwrap().clone()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PumpError {
    #[error("tailing `{table}`: {source}")]
    Log {
        table: String,
        #[source]
        source: LogError,
    },
    #[error("publishing `{table}`: {source}")]
    Broker {
        table: String,
        #[source]
        source: BrokerError,
    },
}

#[derive(Debug, Clone)]
pub struct PumpConfig {
    pub batch: usize,
    /// Chance that a published record is published a second time.
    pub duplicate_fraction: f64,
    pub seed: u64,
    /// Where the tail position is stored; none disables checkpoints.
    pub checkpoint: Option<PathBuf>,
    pub max_backoff: Duration,
}

impl Default for PumpConfig {
    fn default() -> Self {
        PumpConfig {
            batch: 500,
            duplicate_fraction: 0.0,
            seed: 0,
            checkpoint: None,
            max_backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PumpStats {
    pub tailed: u64,
    pub published: u64,
    pub dead_lettered: u64,
    pub duplicates: u64,
    pub retries: u64,
}

pub struct Pump {
    cfg: TableConfig,
    tailer: CdcTailer,
    broker: Arc<Broker>,
    dead: Arc<DeadLetterSink>,
    metrics: Option<(Arc<Collector>, u32)>,
    config: PumpConfig,
    rng: ChaCha8Rng,
    stats: PumpStats,
}

/// The partition key of `record`: row key for master tables, business key
/// for operational ones.
pub fn select_key(record: &ChangeRecord, cfg: &TableConfig) -> Result<String, String> {
    cfg.select_key(record).map_err(|e| e.to_string())
}

impl Pump {
    /// A pump for `cfg.table`. With a checkpoint configured, tailing
    /// resumes after the stored position.
    pub fn new(
        log_dir: impl AsRef<Path>,
        tables: &[TableConfig],
        cfg: &TableConfig,
        broker: Arc<Broker>,
        dead: Arc<DeadLetterSink>,
        config: PumpConfig,
    ) -> Result<Self, PumpError> {
        let log_err = |source| PumpError::Log {
            table: cfg.table.clone(),
            source,
        };
        let from = match &config.checkpoint {
            Some(p) => load_checkpoint(p).map_err(log_err)?.unwrap_or_default(),
            None => Default::default(),
        };
        let tailer = CdcTailer::open(log_dir, tables, &cfg.table, from).map_err(log_err)?;
        Ok(Pump {
            cfg: cfg.clone(),
            tailer,
            broker,
            dead,
            metrics: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a64(cfg.table.as_bytes())),
            config,
            stats: PumpStats::default(),
        })
    }

    pub fn with_metrics(mut self, metrics: Arc<Collector>, node: u32) -> Self {
        self.metrics = Some((metrics, node));
        self
    }

    pub fn with_tailer(mut self, tailer: CdcTailer) -> Self {
        self.tailer = tailer;
        self
    }

    pub fn stats(&self) -> PumpStats {
        self.stats
    }

    fn publish(&mut self, key: &str, payload: &str, tombstone: bool) -> Result<(), PumpError> {
        let mut backoff = Duration::from_millis(1);
        loop {
            match self
                .broker
                .publish(&self.cfg.table, key, payload.to_string(), tombstone)
            {
                Ok(_) => return Ok(()),
                Err(BrokerError::Unavailable | BrokerError::Io { .. }) => {
                    self.stats.retries += 1;
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(self.config.max_backoff);
                }
                Err(source) => {
                    return Err(PumpError::Broker {
                        table: self.cfg.table.clone(),
                        source,
                    })
                }
            }
        }
    }

    /// Tails and publishes one batch without checkpointing. Returns the
    /// number of records tailed.
    pub fn publish_next(&mut self) -> Result<usize, PumpError> {
        let records = self.tailer.poll(self.config.batch).map_err(|source| PumpError::Log {
            table: self.cfg.table.clone(),
            source,
        })?;
        let before = self.stats.published;
        for rec in &records {
            self.stats.tailed += 1;
            let key = match select_key(rec, &self.cfg) {
                Ok(k) => k,
                Err(e) => {
                    self.dead.write(rec, &e);
                    self.stats.dead_lettered += 1;
                    continue;
                }
            };
            let tombstone = rec.is_delete() && self.cfg.nature == TableNature::Master;
            let payload = serde_json::to_string(rec).expect("records serialize");
            self.publish(&key, &payload, tombstone)?;
            self.stats.published += 1;
            if self.config.duplicate_fraction > 0.0 && self.rng.gen_bool(self.config.duplicate_fraction) {
                self.publish(&key, &payload, tombstone)?;
                self.stats.published += 1;
                self.stats.duplicates += 1;
            }
        }
        if let Some((m, node)) = &self.metrics {
            if !records.is_empty() {
                m.record(Stage::Pump, *node, self.stats.published - before, 0, self.stats.dead_lettered);
            }
        }
        Ok(records.len())
    }

    /// Stores the tail position, if checkpoints are configured.
    pub fn checkpoint(&self) -> Result<(), PumpError> {
        if let Some(p) = &self.config.checkpoint {
            save_checkpoint(p, self.tailer.offset()).map_err(|source| PumpError::Log {
                table: self.cfg.table.clone(),
                source,
            })?;
        }
        Ok(())
    }

    /// One tail, publish, checkpoint round.
    pub fn step(&mut self) -> Result<usize, PumpError> {
        let n = self.publish_next()?;
        if n > 0 {
            self.checkpoint()?;
        }
        Ok(n)
    }

    /// Pumps until `input_done` is set and the log is drained, or until
    /// `stop` is set.
    pub fn run(mut self, input_done: &AtomicBool, stop: &AtomicBool) -> Result<PumpStats, PumpError> {
        while !stop.load(Ordering::Relaxed) {
            let done = input_done.load(Ordering::Acquire);
            if self.step()? == 0 {
                if done {
                    break;
                }
                thread::sleep(Duration::from_millis(1));
            }
        }
        Ok(self.stats)
    }
}
