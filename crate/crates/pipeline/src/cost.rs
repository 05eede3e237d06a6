//! Per-node compute budget.
//!
//! Every worker stands for a separate machine. Work is charged as simulated
//! time and paid back by sleeping, so N workers sharing one host core still
//! scale like N machines would.

use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Charged per operational record transformed.
    pub per_record_us: f64,
    /// Charged per join probe against master data.
    pub per_probe_us: f64,
    /// Charged per master row loaded while rebuilding the cache.
    pub per_snapshot_row_us: f64,
    /// Latency of one source-store query in lookback mode.
    pub source_query_us: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            per_record_us: 250.0,
            per_probe_us: 1.5,
            per_snapshot_row_us: 20.0,
            source_query_us: 400.0,
        }
    }
}

impl CostModel {
    /// No charges at all; real compute only.
    pub fn free() -> Self {
        CostModel {
            per_record_us: 0.0,
            per_probe_us: 0.0,
            per_snapshot_row_us: 0.0,
            source_query_us: 0.0,
        }
    }
}

const SETTLE_NS: i64 = 1_000_000;

/// Accumulated simulated work not yet slept off. Oversleeping is credited.
#[derive(Debug)]
pub struct NodeCost {
    model: CostModel,
    debt_ns: i64,
    charged_ns: u64,
}

impl NodeCost {
    pub fn new(model: CostModel) -> Self {
        NodeCost {
            model,
            debt_ns: 0,
            charged_ns: 0,
        }
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    fn charge_us(&mut self, us: f64) {
        let ns = (us * 1000.0).round() as i64;
        if ns > 0 {
            self.debt_ns += ns;
            self.charged_ns += ns as u64;
        }
    }

    pub fn records(&mut self, n: u64) {
        self.charge_us(self.model.per_record_us * n as f64);
    }

    pub fn probes(&mut self, n: u64) {
        self.charge_us(self.model.per_probe_us * n as f64);
    }

    pub fn snapshot_rows(&mut self, n: u64) {
        self.charge_us(self.model.per_snapshot_row_us * n as f64);
    }

    /// Total simulated work so far.
    pub fn charged(&self) -> Duration {
        Duration::from_nanos(self.charged_ns)
    }

    /// Sleeps off the debt once it reaches a millisecond.
    pub fn settle(&mut self) {
        if self.debt_ns >= SETTLE_NS {
            self.pay();
        }
    }

    /// Sleeps off whatever debt remains.
    pub fn pay(&mut self) {
        if self.debt_ns <= 0 {
            return;
        }
        let t = Instant::now();
        thread::sleep(Duration::from_nanos(self.debt_ns as u64));
        self.debt_ns -= t.elapsed().as_nanos() as i64;
    }
}
