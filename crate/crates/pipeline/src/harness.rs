//! Configuration, run orchestration, benchmarks, fault injection and dump
//! verification.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use nrtetl_core::assign::TopicPartition;
use nrtetl_core::buffer::buffer_prefix;
use nrtetl_core::fact::{FactRow, FIELDS};
use nrtetl_core::record::{ChangeRecord, Op};
use nrtetl_core::table::{TableConfig, TableNature};
use nrtetl_core::value::{Row, Scalar};
use serde::{Deserialize, Serialize};

use crate::broker::Broker;
use crate::cdc_log::{read_log, CdcLogWriter, CdcTailer, LogDevice, DEFAULT_SEGMENT_RECORDS};
use crate::cost::CostModel;
use crate::metrics::{rate_between, series, Collector, Event, SeriesRow, Stage};
use crate::processor::{Mode, Worker, WorkerConfig, WorkerContext, WorkerControl, WorkerExit, WorkerStatus};
use crate::producer::{DeadLetterSink, Pump, PumpConfig, PumpStats};
use crate::source::SourceStore;
use crate::uploader::{dump_rows, TargetStore};
use crate::workload::{generate_records, oracle_records, Manifest, WorkloadSpec};

pub const GROUP: &str = "etl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capture {
    /// The whole log exists and is published before workers start.
    Backlog,
    /// The log is written while pumps and workers run.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workers: u32,
    pub op_partitions: u32,
    pub window_ms: i64,
    pub mode: Mode,
    pub batch: usize,
    pub capture: Capture,
    /// Records per second written in live capture.
    pub capture_rate: u64,
    /// Where the log, broker state and dead letters live. Without it the
    /// log goes to a temporary directory and the broker stays in memory.
    pub data_dir: Option<PathBuf>,
    pub segment_records: u64,
    pub quiescence_ms: u64,
    pub deadline_s: u64,
    pub sweep_interval_ms: u64,
    pub retry_cap: u32,
    pub metrics_step_ms: u64,
    /// Overrides of the table layout; must name the preset's tables.
    pub tables: Vec<TableConfig>,
    pub workload: WorkloadSpec,
    pub cost: CostModel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workers: 4,
            op_partitions: 20,
            window_ms: 3_600_000,
            mode: Mode::Cached,
            batch: 500,
            capture: Capture::Backlog,
            capture_rate: 20_000,
            data_dir: None,
            segment_records: DEFAULT_SEGMENT_RECORDS,
            quiescence_ms: 2_000,
            deadline_s: 120,
            sweep_interval_ms: 500,
            retry_cap: 1_000,
            metrics_step_ms: 100,
            tables: Vec::new(),
            workload: WorkloadSpec::default(),
            cost: CostModel::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage}: {message}")]
pub struct HarnessError {
    pub stage: &'static str,
    pub message: String,
}

impl HarnessError {
    pub fn new(stage: &'static str, message: impl fmt::Display) -> Self {
        HarnessError {
            stage,
            message: message.to_string(),
        }
    }

    pub fn is_config(&self) -> bool {
        self.stage == "config"
    }
}

fn cfg_err(m: impl fmt::Display) -> HarnessError {
    HarnessError::new("config", m)
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: PipelineConfig = toml::from_str(text).map_err(cfg_err)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.workers == 0 {
            return Err(cfg_err("workers must be at least 1"));
        }
        if self.op_partitions == 0 {
            return Err(cfg_err("op_partitions must be at least 1"));
        }
        if self.window_ms <= 0 {
            return Err(cfg_err("window_ms must be positive"));
        }
        if self.batch == 0 || self.capture_rate == 0 || self.segment_records == 0 {
            return Err(cfg_err("batch, capture_rate and segment_records must be positive"));
        }
        self.workload.validate().map_err(cfg_err)?;
        let expected = self.workload.schema_preset.table_configs(self.op_partitions);
        if !self.tables.is_empty() {
            for t in &self.tables {
                t.validate().map_err(|e| cfg_err(format!("table `{}`: {e}", t.table)))?;
                if t.nature == TableNature::Operational && !t.has_business_key() {
                    return Err(cfg_err(format!("operational table `{}` needs a business key", t.table)));
                }
            }
            if self.tables != expected {
                return Err(cfg_err(format!(
                    "tables must match the {:?} schema: {}",
                    self.workload.schema_preset,
                    expected.iter().map(|t| t.table.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn table_configs(&self) -> Vec<TableConfig> {
        self.workload.schema_preset.table_configs(self.op_partitions)
    }

    pub fn op_table(&self) -> &'static str {
        self.workload.schema_preset.operational_table()
    }
}

/// A worker crash at a point of progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kill {
    pub worker: u32,
    /// Fraction of the operational records processed, in [0, 1].
    pub at_fraction: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub kills: Vec<Kill>,
    /// Replays this existing log directory instead of generating one.
    pub log_dir: Option<PathBuf>,
    /// Compare the dump with the oracle.
    pub check_oracle: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KillRecord {
    pub worker: u32,
    pub at_us: u64,
    pub progress: f64,
    pub during_bootstrap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub series: Vec<SeriesRow>,
    pub runtime: Duration,
    /// From worker start to the last processed record.
    pub processing: Duration,
    /// Operational records processed, redeliveries included.
    pub processed: u64,
    /// `processed` over `processing`, records per second.
    pub throughput: f64,
    /// Total time spent rebuilding caches, per worker.
    pub bootstrap_ms: Vec<f64>,
    /// From worker start to the first processed record.
    pub first_result_ms: Option<f64>,
    pub buffer_peak: u64,
    pub buffered_at_end: u64,
    pub dead_letters: u64,
    pub published: u64,
    pub pumps: BTreeMap<String, PumpStats>,
    pub kills: Vec<KillRecord>,
    pub pre_kill_throughput: Option<f64>,
    pub post_kill_throughput: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub dump: Vec<String>,
    pub manifest: Manifest,
    /// Present when the oracle was checked.
    pub diff: Option<DiffReport>,
    /// Partition owners after the run ended, for coverage checks.
    pub final_assignment: BTreeMap<String, Vec<u32>>,
    pub integrity: Result<(), String>,
    pub config: PipelineConfig,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.diff.as_ref().is_none_or(DiffReport::is_empty) && self.integrity.is_ok()
    }

    /// Reproducibility header for CSV output.
    pub fn header(&self) -> Vec<String> {
        csv_header(&self.config)
    }

    pub fn series_csv(&self) -> String {
        crate::metrics::csv_text(&self.header(), &self.metrics.series)
    }
}

pub fn csv_header(config: &PipelineConfig) -> Vec<String> {
    vec![format!("seed = {}", config.workload.seed), config.to_toml()]
}

/// Where a run's files go; a temporary directory unless configured.
struct RunDir {
    path: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

fn run_dir(config: &PipelineConfig) -> Result<RunDir, HarnessError> {
    match &config.data_dir {
        Some(p) => {
            fs::create_dir_all(p).map_err(|e| HarnessError::new("setup", format!("{}: {e}", p.display())))?;
            Ok(RunDir {
                path: p.clone(),
                _tmp: None,
            })
        }
        None => {
            let t = tempfile::tempdir().map_err(|e| HarnessError::new("setup", e))?;
            Ok(RunDir {
                path: t.path().to_path_buf(),
                _tmp: Some(t),
            })
        }
    }
}

/// Writes a generated workload and its manifest to `dir`.
pub fn sample(spec: &WorkloadSpec, dir: impl AsRef<Path>, segment_records: u64) -> Result<Manifest, HarnessError> {
    let dir = dir.as_ref();
    let g = generate_records(spec).map_err(cfg_err)?;
    let tables = spec.schema_preset.table_configs(1);
    let log_dir = dir.join("log");
    let mut w = CdcLogWriter::open(&log_dir, &tables, segment_records).map_err(|e| HarnessError::new("sampler", e))?;
    if w.last_seq() != 0 {
        return Err(HarnessError::new("sampler", format!("{} already holds a log", log_dir.display())));
    }
    w.append_all(g.records).map_err(|e| HarnessError::new("sampler", e))?;
    w.flush().map_err(|e| HarnessError::new("sampler", e))?;
    g.manifest
        .save(dir.join("manifest.json"))
        .map_err(|e| HarnessError::new("sampler", e))?;
    Ok(g.manifest)
}

/// Loads the records and manifest of a directory written by [`sample`].
pub fn load_sample(dir: impl AsRef<Path>, spec: &WorkloadSpec) -> Result<(Vec<ChangeRecord>, Manifest), HarnessError> {
    let dir = dir.as_ref();
    let tables = spec.schema_preset.table_configs(1);
    let records = read_log(dir.join("log"), &tables).map_err(|e| HarnessError::new("log", e))?;
    let manifest = Manifest::load(dir.join("manifest.json")).map_err(|e| HarnessError::new("log", e))?;
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.table.clone()).or_default() += 1;
    }
    if records.len() as u64 != manifest.total
        || counts.iter().any(|(t, n)| manifest.count(t) != *n)
    {
        return Err(HarnessError::new("log", "log does not match its manifest"));
    }
    if manifest.schema_preset != spec.schema_preset {
        return Err(cfg_err("log was generated for a different schema preset"));
    }
    Ok((records, manifest))
}

struct LiveWorker {
    member: String,
    control: Arc<WorkerControl>,
    status: Arc<WorkerStatus>,
    handle: Option<JoinHandle<Result<WorkerExit, String>>>,
    killed: bool,
}

fn wall_error(stage: &'static str) -> impl Fn(String) -> HarnessError {
    move |m| HarnessError::new(stage, m)
}

/// Runs the whole pipeline over one workload until every record has been
/// processed and the buffer has drained.
pub fn run(config: &PipelineConfig, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    config.validate()?;
    for k in &opts.kills {
        if k.worker >= config.workers || !(0.0..=1.0).contains(&k.at_fraction) {
            return Err(cfg_err(format!("invalid kill {k:?}")));
        }
    }
    let killed: std::collections::BTreeSet<u32> = opts.kills.iter().map(|k| k.worker).collect();
    if killed.len() as u32 >= config.workers {
        return Err(cfg_err("at least one worker must survive"));
    }
    let spec = &config.workload;
    let tables = config.table_configs();
    let op_table = config.op_table();
    let dir = run_dir(config)?;
    let started = Instant::now();

    let (records, manifest, log_dir) = match &opts.log_dir {
        Some(d) => {
            let (r, m) = load_sample(d, spec)?;
            (r, m, d.join("log"))
        }
        None => {
            let g = generate_records(spec).map_err(cfg_err)?;
            let log_dir = dir.path.join("log");
            if log_dir.exists() {
                fs::remove_dir_all(&log_dir).map_err(|e| HarnessError::new("setup", e))?;
            }
            (g.records, g.manifest, log_dir)
        }
    };
    let expected_ops = manifest.count(op_table).max(1);

    let broker = Arc::new(match &config.data_dir {
        Some(_) => {
            let bdir = dir.path.join("broker");
            if bdir.exists() {
                fs::remove_dir_all(&bdir).map_err(|e| HarnessError::new("setup", e))?;
            }
            Broker::open(&bdir).map_err(|e| HarnessError::new("broker", e))?
        }
        None => Broker::in_memory(),
    });
    for t in &tables {
        let parts = if t.nature == TableNature::Master { 1 } else { t.partition_count };
        broker
            .create_topic(&t.table, parts, t.nature)
            .map_err(|e| HarnessError::new("broker", e))?;
    }
    let dead = Arc::new(match &config.data_dir {
        Some(_) => DeadLetterSink::open(dir.path.join("dead_letters.log")).map_err(|e| HarnessError::new("setup", e))?,
        None => DeadLetterSink::memory(),
    });
    let target = Arc::new(TargetStore::new(config.batch));
    let metrics = Arc::new(Collector::new());
    let source = match config.mode {
        Mode::Lookback => Some(Arc::new(SourceStore::from_records(
            &records,
            &tables,
            Duration::from_nanos((config.cost.source_query_us * 1000.0) as u64),
        ))),
        Mode::Cached => None,
    };

    // Change capture: the writer side.
    let input_done = Arc::new(AtomicBool::new(false));
    let stop_pumps = Arc::new(AtomicBool::new(false));
    let writer = if opts.log_dir.is_some() {
        input_done.store(true, Ordering::Release);
        None
    } else {
        let mut w = CdcLogWriter::open(&log_dir, &tables, config.segment_records).map_err(|e| HarnessError::new("log", e))?;
        match config.capture {
            Capture::Backlog => {
                w.append_all(records.iter().cloned()).map_err(|e| HarnessError::new("log", e))?;
                w.flush().map_err(|e| HarnessError::new("log", e))?;
                input_done.store(true, Ordering::Release);
                None
            }
            Capture::Live => {
                let recs = records.clone();
                let done = input_done.clone();
                let stop = stop_pumps.clone();
                let rate = config.capture_rate;
                Some(thread::spawn(move || -> Result<(), String> {
                    let t0 = Instant::now();
                    let mut written = 0u64;
                    let mut it = recs.into_iter().peekable();
                    while it.peek().is_some() {
                        if stop.load(Ordering::Relaxed) {
                            return Ok(());
                        }
                        let due = (t0.elapsed().as_secs_f64() * rate as f64) as u64 + 1;
                        while written < due {
                            let Some(r) = it.next() else { break };
                            w.append(r).map_err(|e| e.to_string())?;
                            written += 1;
                        }
                        w.flush().map_err(|e| e.to_string())?;
                        thread::sleep(Duration::from_millis(2));
                    }
                    w.flush().map_err(|e| e.to_string())?;
                    done.store(true, Ordering::Release);
                    Ok(())
                }))
            }
        }
    };

    let mut pumps: Vec<(String, JoinHandle<Result<PumpStats, String>>)> = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        // A fresh run never resumes an old tail position.
        if config.data_dir.is_some() {
            let _ = fs::remove_file(dir.path.join(format!("checkpoint-{}", t.table)));
        }
        let pump = Pump::new(
            &log_dir,
            &tables,
            t,
            broker.clone(),
            dead.clone(),
            PumpConfig {
                batch: config.batch,
                duplicate_fraction: spec.duplicate_fraction,
                seed: spec.seed,
                checkpoint: config
                    .data_dir
                    .as_ref()
                    .map(|_| dir.path.join(format!("checkpoint-{}", t.table))),
                ..PumpConfig::default()
            },
        )
        .map_err(|e| HarnessError::new("producer", e))?
        .with_metrics(metrics.clone(), i as u32);
        let done = input_done.clone();
        let stop = stop_pumps.clone();
        pumps.push((
            t.table.clone(),
            thread::spawn(move || pump.run(&done, &stop).map_err(|e| e.to_string())),
        ));
    }
    let mut pump_stats: BTreeMap<String, PumpStats> = BTreeMap::new();
    let mut pumps_done = false;
    let finish_pumps = |pumps: &mut Vec<(String, JoinHandle<Result<PumpStats, String>>)>,
                        stats: &mut BTreeMap<String, PumpStats>|
     -> Result<(), HarnessError> {
        for (t, h) in pumps.drain(..) {
            let s = h
                .join()
                .map_err(|_| HarnessError::new("producer", "pump panicked"))?
                .map_err(wall_error("producer"))?;
            stats.insert(t, s);
        }
        Ok(())
    };
    if config.capture == Capture::Backlog {
        finish_pumps(&mut pumps, &mut pump_stats)?;
        pumps_done = true;
    }

    // Workers all join before any of them polls, so the first assignment
    // covers everyone.
    let ctx = WorkerContext {
        broker: broker.clone(),
        target: target.clone(),
        dead: dead.clone(),
        metrics: metrics.clone(),
        source,
    };
    let mut workers = Vec::new();
    let mut prepared = Vec::new();
    for i in 0..config.workers {
        let mut wc = WorkerConfig::new(format!("w{i:02}"), spec.schema_preset, config.op_partitions);
        wc.index = i;
        wc.group = GROUP.into();
        wc.window_ms = config.window_ms;
        wc.batch = config.batch;
        wc.mode = config.mode;
        wc.cost = config.cost;
        wc.sweep_interval = Duration::from_millis(config.sweep_interval_ms);
        wc.retry_cap = config.retry_cap;
        let mut w = Worker::new(wc, ctx.clone()).map_err(|e| HarnessError::new("processor", e))?;
        w.join().map_err(|e| HarnessError::new("processor", e))?;
        prepared.push(w);
    }
    let workers_started_us = metrics.now_us();
    for w in prepared {
        let control = Arc::new(WorkerControl::default());
        let status = w.status();
        let member = w.id().to_string();
        let c = control.clone();
        let handle = thread::spawn(move || w.run(&c).map_err(|e| e.to_string()));
        workers.push(LiveWorker {
            member,
            control,
            status,
            handle: Some(handle),
            killed: false,
        });
    }

    let deadline = Duration::from_secs(config.deadline_s);
    let quiescence = Duration::from_millis(config.quiescence_ms);
    let mut pending_kills = opts.kills.clone();
    pending_kills.sort_by(|a, b| a.at_fraction.total_cmp(&b.at_fraction));
    let mut kill_records = Vec::new();
    let mut stable_since: Option<(Instant, u64, u64)> = None;
    let mut failure: Option<HarnessError> = None;
    let mut writer = writer;

    loop {
        thread::sleep(Duration::from_millis(5));
        if started.elapsed() > deadline {
            failure = Some(HarnessError::new("harness", format!("run exceeded the {}s deadline", config.deadline_s)));
            break;
        }
        if let Some(h) = writer.take_if(|h| h.is_finished()) {
            if let Err(e) = h.join().map_err(|_| "writer panicked".to_string()).and_then(|r| r) {
                failure = Some(HarnessError::new("log", e));
                break;
            }
        }
        if !pumps_done && pumps.iter().all(|(_, h)| h.is_finished()) {
            if let Err(e) = finish_pumps(&mut pumps, &mut pump_stats) {
                failure = Some(e);
                break;
            }
            pumps_done = true;
        }
        if let Some(w) = workers.iter_mut().find(|w| !w.killed && w.handle.as_ref().is_some_and(|h| h.is_finished())) {
            let r = w.handle.take().unwrap().join();
            failure = Some(HarnessError::new(
                "processor",
                match r {
                    Ok(Err(e)) => format!("{}: {e}", w.member),
                    _ => format!("{} stopped unexpectedly", w.member),
                },
            ));
            break;
        }

        let processed: u64 = workers.iter().map(|w| w.status.processed.load(Ordering::Relaxed)).sum();
        let progress = processed as f64 / expected_ops as f64;
        while pending_kills.first().is_some_and(|k| progress >= k.at_fraction) {
            let k = pending_kills.remove(0);
            let w = &mut workers[k.worker as usize];
            if w.killed {
                continue;
            }
            let during_bootstrap = !w.status.ready.load(Ordering::Relaxed);
            w.control.kill.store(true, Ordering::Relaxed);
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
            w.killed = true;
            // The crashed member is detected and removed from the group.
            let _ = broker.leave(GROUP, &w.member);
            log::info!("killed {} at {:.3} of the operational records", w.member, progress);
            kill_records.push(KillRecord {
                worker: k.worker,
                at_us: metrics.now_us(),
                progress,
                during_bootstrap,
            });
        }

        let caught_up = pumps_done
            && input_done.load(Ordering::Acquire)
            && (0..config.op_partitions).all(|p| {
                let tp = TopicPartition::new(op_table, p);
                broker.end_offset(op_table, p).is_ok_and(|end| broker.committed(GROUP, &tp) >= end)
            })
            && broker.count_shared(&buffer_prefix(op_table)) == 0
            && workers.iter().filter(|w| !w.killed).all(|w| {
                w.status.ready.load(Ordering::Relaxed)
                    && w.status.idle.load(Ordering::Relaxed)
                    && w.status.master_lag.load(Ordering::Relaxed) == 0
                    && w.status.buffered.load(Ordering::Relaxed) == 0
            })
            && pending_kills.is_empty();
        let published = broker.published();
        if caught_up {
            match stable_since {
                Some((t, p, q)) if p == processed && q == published => {
                    if t.elapsed() >= quiescence {
                        break;
                    }
                }
                _ => stable_since = Some((Instant::now(), processed, published)),
            }
        } else {
            stable_since = None;
        }
    }

    let final_assignment = ownership_after(&broker);
    stop_pumps.store(true, Ordering::Relaxed);
    for w in &workers {
        if !w.killed {
            w.control.stop.store(true, Ordering::Relaxed);
        }
    }
    for w in &mut workers {
        if let Some(h) = w.handle.take() {
            match h.join() {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => {
                    failure.get_or_insert(HarnessError::new("processor", format!("{}: {e}", w.member)));
                }
                Err(_) => {
                    failure.get_or_insert(HarnessError::new("processor", format!("{} panicked", w.member)));
                }
            }
        }
    }
    if let Some(h) = writer.take() {
        let _ = h.join();
    }
    if let Err(e) = finish_pumps(&mut pumps, &mut pump_stats) {
        failure.get_or_insert(e);
    }
    if let Some(f) = failure {
        return Err(f);
    }

    let runtime = started.elapsed();
    let events = metrics.drain();
    let last_processed_us = events
        .iter()
        .filter(|e| e.stage == Stage::Worker && e.records > 0)
        .map(|e| e.t_us)
        .max()
        .unwrap_or(workers_started_us);
    let processed: u64 = workers.iter().map(|w| w.status.processed.load(Ordering::Relaxed)).sum();
    let processing = Duration::from_micros(last_processed_us.saturating_sub(workers_started_us));
    let (pre, post) = match kill_records.first() {
        Some(k) => (
            Some(rate_between(&events, Stage::Worker, workers_started_us, k.at_us)),
            Some(rate_between(&events, Stage::Worker, k.at_us, last_processed_us)),
        ),
        None => (None, None),
    };
    let first_result_ms = workers
        .iter()
        .map(|w| w.status.first_processed_us.load(Ordering::Relaxed))
        .filter(|&t| t > 0)
        .min()
        .map(|t| (t - 1).saturating_sub(workers_started_us) as f64 / 1000.0);
    let metrics_out = RunMetrics {
        series: series(&shift(&events, workers_started_us.min(events.first().map_or(0, |e| e.t_us))), config.metrics_step_ms),
        runtime,
        processing,
        processed,
        throughput: if processing.is_zero() {
            0.0
        } else {
            processed as f64 / processing.as_secs_f64()
        },
        bootstrap_ms: workers
            .iter()
            .map(|w| w.status.bootstrap_total_us.load(Ordering::Relaxed) as f64 / 1000.0)
            .collect(),
        first_result_ms,
        buffer_peak: workers.iter().map(|w| w.status.buffer_peak.load(Ordering::Relaxed)).max().unwrap_or(0),
        buffered_at_end: broker.count_shared(&buffer_prefix(op_table)) as u64,
        dead_letters: dead.count(),
        published: broker.published(),
        pumps: pump_stats,
        kills: kill_records,
        pre_kill_throughput: pre,
        post_kill_throughput: post,
    };

    let dump = target.export();
    let diff = opts.check_oracle.then(|| {
        let expected = dump_rows(&oracle_records(&records, spec.schema_preset, config.window_ms));
        verify(&dump, &expected).unwrap_or_else(|e| DiffReport {
            entries: vec![DiffEntry::Malformed(e)],
        })
    });
    Ok(RunReport {
        metrics: metrics_out,
        dump,
        manifest,
        diff,
        final_assignment,
        integrity: target.integrity_scan(),
        config: config.clone(),
    })
}

fn shift(events: &[Event], origin: u64) -> Vec<Event> {
    events
        .iter()
        .map(|e| Event {
            t_us: e.t_us - origin.min(e.t_us),
            ..*e
        })
        .collect()
}

/// Partitions each member owns according to the ownership log.
fn ownership_after(broker: &Broker) -> BTreeMap<String, Vec<u32>> {
    let mut owned: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for ev in broker.ownership_log() {
        let parts = ev.partitions.iter().map(|tp| tp.partition).collect();
        if ev.gained {
            owned.insert(ev.member, parts);
        } else {
            owned.remove(&ev.member);
        }
    }
    owned
}

/// A run with workers killed at the given progress points, checked against
/// the oracle.
pub fn fault_inject(config: &PipelineConfig, kills: &[Kill]) -> Result<RunReport, HarnessError> {
    run(
        config,
        &RunOptions {
            kills: kills.to_vec(),
            log_dir: None,
            check_oracle: true,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalePoint {
    pub workers: u32,
    pub throughputs: Vec<f64>,
    pub median: f64,
    /// Runs that failed, with the reason.
    pub failures: Vec<String>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Throughput against worker count over one shared backlog log.
pub fn bench_scalability(config: &PipelineConfig, workers: &[u32], repeats: usize) -> Result<Vec<ScalePoint>, HarnessError> {
    config.validate()?;
    let tmp = tempfile::tempdir().map_err(|e| HarnessError::new("setup", e))?;
    sample(&config.workload, tmp.path(), config.segment_records)?;
    let mut out = Vec::new();
    for &w in workers {
        let mut c = config.clone();
        c.workers = w;
        c.capture = Capture::Backlog;
        c.data_dir = None;
        let mut point = ScalePoint {
            workers: w,
            throughputs: Vec::new(),
            median: 0.0,
            failures: Vec::new(),
        };
        for _ in 0..repeats.max(1) {
            let opts = RunOptions {
                log_dir: Some(tmp.path().to_path_buf()),
                ..RunOptions::default()
            };
            match run(&c, &opts) {
                Ok(r) => point.throughputs.push(r.metrics.throughput),
                Err(e) => point.failures.push(e.to_string()),
            }
        }
        point.median = median(&point.throughputs);
        out.push(point);
    }
    Ok(out)
}

pub fn scale_csv(config: &PipelineConfig, points: &[ScalePoint]) -> String {
    let mut s = header_text(&csv_header(config));
    s.push_str("workers,runs,median_records_per_s,min_records_per_s,max_records_per_s,failures\n");
    for p in points {
        let min = p.throughputs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = p.throughputs.iter().copied().fold(0.0, f64::max);
        s.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{}\n",
            p.workers,
            p.throughputs.len(),
            p.median,
            if min.is_finite() { min } else { 0.0 },
            max,
            p.failures.len()
        ));
    }
    s
}

fn header_text(header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        for l in h.lines() {
            s.push_str("# ");
            s.push_str(l);
            s.push('\n');
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InsertionMode {
    /// Only the extracted tables receive inserts.
    Growing,
    /// A fixed set of tables receives inserts whatever is extracted.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailerBench {
    pub records_per_table: u64,
    /// Tables receiving inserts in fixed mode.
    pub fixed_tables: u32,
    pub device_latency_us: u64,
    pub chunk_records: usize,
    pub channels: usize,
}

impl Default for TailerBench {
    fn default() -> Self {
        TailerBench {
            records_per_table: 2_000,
            fixed_tables: 16,
            device_latency_us: 5_000,
            chunk_records: 500,
            channels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailerPoint {
    pub mode: InsertionMode,
    pub tables: u32,
    pub records: u64,
    pub seconds: f64,
    pub throughput: f64,
}

fn bench_table(i: u32) -> String {
    format!("t{i:02}")
}

/// Extraction throughput with `tables` concurrent tailers.
pub fn bench_tailer_point(bench: &TailerBench, mode: InsertionMode, tables: u32) -> Result<TailerPoint, HarnessError> {
    let inserted = match mode {
        InsertionMode::Growing => tables,
        InsertionMode::Fixed => bench.fixed_tables.max(tables),
    };
    let configs: Vec<TableConfig> = (0..inserted)
        .map(|i| TableConfig::master(&bench_table(i), "id", ""))
        .collect();
    let tmp = tempfile::tempdir().map_err(|e| HarnessError::new("setup", e))?;
    let mut w = CdcLogWriter::open(tmp.path(), &configs, DEFAULT_SEGMENT_RECORDS).map_err(|e| HarnessError::new("log", e))?;
    for n in 0..bench.records_per_table {
        for i in 0..inserted {
            let row: Row = [
                ("id".to_string(), Scalar::Int(n as i64)),
                ("value".to_string(), Scalar::Int((n * 7 + i as u64) as i64)),
            ]
            .into_iter()
            .collect();
            w.append(ChangeRecord::new(bench_table(i), Op::Insert, n as i64, row))
                .map_err(|e| HarnessError::new("log", e))?;
        }
    }
    w.flush().map_err(|e| HarnessError::new("log", e))?;
    let device = Arc::new(LogDevice::new(
        Duration::from_micros(bench.device_latency_us),
        bench.chunk_records,
        bench.channels,
    ));
    let t0 = Instant::now();
    let handles: Vec<JoinHandle<Result<u64, String>>> = (0..tables)
        .map(|i| {
            let dir = tmp.path().to_path_buf();
            let configs = configs.clone();
            let device = device.clone();
            thread::spawn(move || {
                let mut t = CdcTailer::open(&dir, &configs, &bench_table(i), Default::default())
                    .map_err(|e| e.to_string())?
                    .with_device(device);
                let mut n = 0u64;
                loop {
                    let got = t.poll(1_000).map_err(|e| e.to_string())?;
                    if got.is_empty() {
                        return Ok(n);
                    }
                    n += got.len() as u64;
                }
            })
        })
        .collect();
    let mut records = 0;
    for h in handles {
        records += h
            .join()
            .map_err(|_| HarnessError::new("tailer", "tailer panicked"))?
            .map_err(wall_error("tailer"))?;
    }
    let seconds = t0.elapsed().as_secs_f64();
    Ok(TailerPoint {
        mode,
        tables,
        records,
        seconds,
        throughput: records as f64 / seconds,
    })
}

pub fn bench_tailer(bench: &TailerBench, counts: &[u32], mode: InsertionMode) -> Result<Vec<TailerPoint>, HarnessError> {
    counts.iter().map(|&n| bench_tailer_point(bench, mode, n)).collect()
}

pub fn tailer_csv(bench: &TailerBench, points: &[TailerPoint]) -> String {
    let mut s = header_text(&[toml::to_string(bench).expect("bench config serializes")]);
    s.push_str("mode,tables,records,seconds,records_per_s\n");
    for p in points {
        s.push_str(&format!(
            "{:?},{},{},{:.4},{:.1}\n",
            p.mode, p.tables, p.records, p.seconds, p.throughput
        ));
    }
    s.replace("Growing,", "GROWING,").replace("Fixed,", "FIXED,")
}

pub const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum DiffEntry {
    OnlyLeft(u64),
    OnlyRight(u64),
    Field { fact_id: u64, field: &'static str, left: String, right: String },
    Malformed(String),
}

impl fmt::Display for DiffEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiffEntry::OnlyLeft(id) => write!(f, "{id:016x}: only in left"),
            DiffEntry::OnlyRight(id) => write!(f, "{id:016x}: only in right"),
            DiffEntry::Field { fact_id, field, left, right } => {
                write!(f, "{fact_id:016x}: {field}: {left} != {right}")
            }
            DiffEntry::Malformed(m) => write!(f, "malformed dump: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiffReport {
    pub entries: Vec<DiffEntry>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for DiffReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

fn parse_dump(lines: &[String], side: &str) -> Result<BTreeMap<u64, (FactRow, Vec<String>)>, String> {
    let mut out = BTreeMap::new();
    for (i, l) in lines.iter().enumerate() {
        if l.is_empty() {
            continue;
        }
        let row = FactRow::parse_line(l).map_err(|e| format!("{side} line {}: {e}", i + 1))?;
        let fields = l.split(',').map(str::to_string).collect();
        if out.insert(row.fact_id, (row, fields)).is_some() {
            return Err(format!("{side} line {}: duplicate fact id", i + 1));
        }
    }
    Ok(out)
}

/// Compares two canonical dumps. Ratio fields match within
/// [`RATIO_TOLERANCE`]; everything else must match exactly.
pub fn verify(left: &[String], right: &[String]) -> Result<DiffReport, String> {
    let a = parse_dump(left, "left")?;
    let b = parse_dump(right, "right")?;
    let mut entries = Vec::new();
    for (id, (ra, fa)) in &a {
        let Some((rb, fb)) = b.get(id) else {
            entries.push(DiffEntry::OnlyLeft(*id));
            continue;
        };
        let ratios = [
            (9, ra.availability, rb.availability),
            (10, ra.performance, rb.performance),
            (11, ra.quality, rb.quality),
            (12, ra.oee, rb.oee),
        ];
        for i in 0..9 {
            if fa[i] != fb[i] {
                entries.push(DiffEntry::Field {
                    fact_id: *id,
                    field: FIELDS[i],
                    left: fa[i].clone(),
                    right: fb[i].clone(),
                });
            }
        }
        for (i, x, y) in ratios {
            let same = match (x, y) {
                (None, None) => true,
                (Some(x), Some(y)) => (x - y).abs() <= RATIO_TOLERANCE,
                _ => false,
            };
            if !same {
                entries.push(DiffEntry::Field {
                    fact_id: *id,
                    field: FIELDS[i],
                    left: fa[i].clone(),
                    right: fb[i].clone(),
                });
            }
        }
    }
    for id in b.keys() {
        if !a.contains_key(id) {
            entries.push(DiffEntry::OnlyRight(*id));
        }
    }
    Ok(DiffReport { entries })
}

/// Reads a dump file into lines.
pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<String>, HarnessError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HarnessError::new("verify", format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(PipelineConfig::from_toml("workers = 0").unwrap_err().is_config());
        assert!(PipelineConfig::from_toml("op_partitions = 0").is_err());
        assert!(PipelineConfig::from_toml("nonsense = 1").is_err());
        assert!(PipelineConfig::from_toml("mode = \"LOOKBACK\"\n[workload]\nseed = 9").is_ok());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }
}
