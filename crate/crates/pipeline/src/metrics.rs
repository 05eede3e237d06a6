//! Run metrics. Pumps and workers append events to a lock-free queue; the
//! harness turns them into per-node rate series once the run is over.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use crossbeam_queue::SegQueue;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pump,
    Worker,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pump => "pump",
            Stage::Worker => "worker",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Microseconds since the collector started.
    pub t_us: u64,
    pub stage: Stage,
    pub node: u32,
    /// Records completed since the node's previous event.
    pub records: u64,
    /// Buffered records held by the node after this event.
    pub buffered: u64,
    /// Dead letters written by the node so far.
    pub dead_letters: u64,
}

#[derive(Debug)]
pub struct Collector {
    start: Instant,
    events: SegQueue<Event>,
}

impl Default for Collector {
    fn default() -> Self {
        Collector {
            start: Instant::now(),
            events: SegQueue::new(),
        }
    }
}

impl Collector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    pub fn record(&self, stage: Stage, node: u32, records: u64, buffered: u64, dead_letters: u64) {
        self.events.push(Event {
            t_us: self.now_us(),
            stage,
            node,
            records,
            buffered,
            dead_letters,
        });
    }

    /// Takes every event appended so far, in time order.
    pub fn drain(&self) -> Vec<Event> {
        let mut out = Vec::with_capacity(self.events.len());
        while let Some(e) = self.events.pop() {
            out.push(e);
        }
        out.sort_by_key(|e| e.t_us);
        out
    }
}

/// Records of `stage` completed in `(from_us, to_us]`, per second.
pub fn rate_between(events: &[Event], stage: Stage, from_us: u64, to_us: u64) -> f64 {
    if to_us <= from_us {
        return 0.0;
    }
    let n: u64 = events
        .iter()
        .filter(|e| e.stage == stage && e.t_us > from_us && e.t_us <= to_us)
        .map(|e| e.records)
        .sum();
    n as f64 * 1e6 / (to_us - from_us) as f64
}

pub const GAUGE_WINDOW_US: u64 = 1_000_000;

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub timestamp_ms: u64,
    pub stage: Stage,
    /// Node number, or `all` for the stage total.
    pub worker_id: String,
    pub records_per_s: f64,
    pub buffered: u64,
    pub dead_letters: u64,
}

pub const CSV_COLUMNS: &str = "timestamp_ms,stage,worker_id,records_per_s,buffered,dead_letters";

/// Samples every node and every stage total each `step_ms`, with the rate
/// taken over the trailing one-second window.
pub fn series(events: &[Event], step_ms: u64) -> Vec<SeriesRow> {
    let step_us = step_ms.max(1) * 1000;
    let Some(last) = events.iter().map(|e| e.t_us).max() else {
        return Vec::new();
    };
    let mut nodes: BTreeMap<(Stage, u32), Vec<&Event>> = BTreeMap::new();
    for e in events {
        nodes.entry((e.stage, e.node)).or_default().push(e);
    }
    let mut out = Vec::new();
    let mut t = step_us;
    loop {
        let mut totals: BTreeMap<Stage, (f64, u64, u64)> = BTreeMap::new();
        for ((stage, node), evs) in &nodes {
            let first = evs[0].t_us;
            if first > t {
                continue;
            }
            let lo = t.saturating_sub(GAUGE_WINDOW_US);
            let n: u64 = evs
                .iter()
                .filter(|e| e.t_us > lo && e.t_us <= t)
                .map(|e| e.records)
                .sum();
            let rate = n as f64 * 1e6 / GAUGE_WINDOW_US as f64;
            let latest = evs.iter().take_while(|e| e.t_us <= t).last().unwrap();
            let tot = totals.entry(*stage).or_default();
            tot.0 += rate;
            tot.1 += latest.buffered;
            tot.2 += latest.dead_letters;
            out.push(SeriesRow {
                timestamp_ms: t / 1000,
                stage: *stage,
                worker_id: node.to_string(),
                records_per_s: rate,
                buffered: latest.buffered,
                dead_letters: latest.dead_letters,
            });
        }
        for (stage, (rate, buffered, dead_letters)) in totals {
            out.push(SeriesRow {
                timestamp_ms: t / 1000,
                stage,
                worker_id: "all".into(),
                records_per_s: rate,
                buffered,
                dead_letters,
            });
        }
        if t >= last {
            break;
        }
        t += step_us;
    }
    out
}

/// Writes `rows` as CSV preceded by `#`-prefixed header lines.
pub fn write_csv(path: impl AsRef<Path>, header: &[String], rows: &[SeriesRow]) -> io::Result<()> {
    fs::write(path, csv_text(header, rows))
}

pub fn csv_text(header: &[String], rows: &[SeriesRow]) -> String {
    let mut s = String::new();
    for h in header {
        for line in h.lines() {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
    }
    s.push_str(CSV_COLUMNS);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.3},{},{}\n",
            r.timestamp_ms, r.stage, r.worker_id, r.records_per_s, r.buffered, r.dead_letters
        ));
    }
    s
}
