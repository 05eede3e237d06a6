//! Synthetic steelworks workload and the batch oracle.
//!
//! Each equipment unit gets a status history alternating ON and OFF, ending
//! OFF. Production runs sit strictly inside ON periods and quality
//! inspections fall inside runs. The same plan is rendered either as three
//! flat tables or as a normalized schema with lookups. Transaction times are
//! simulated milliseconds, independent of the wall clock.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nrtetl_core::fact::FactRow;
use nrtetl_core::record::{ChangeRecord, Op};
use nrtetl_core::schema::{complex, simple, KeyData, Preset, EQUIP};
use nrtetl_core::table::{TableConfig, TableNature};
use nrtetl_core::value::{Row, Scalar};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdc_log::{read_log, CdcLogWriter, LogError};

pub const BASE_TS: i64 = 1_700_000_000_000;
const MIN: i64 = 60_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub equipment_count: u32,
    pub records_per_table: u32,
    pub schema_preset: Preset,
    pub seed: u64,
    pub late_master_fraction: f64,
    pub duplicate_fraction: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            equipment_count: 20,
            records_per_table: 2_000,
            schema_preset: Preset::Simple,
            seed: 1,
            late_master_fraction: 0.0,
            duplicate_fraction: 0.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Invalid(m));
        if self.equipment_count == 0 {
            return bad("equipment_count must be at least 1".into());
        }
        if self.records_per_table < 2 * self.equipment_count {
            return bad(format!(
                "records_per_table must be at least {} (two status rows per equipment)",
                2 * self.equipment_count
            ));
        }
        for (name, f) in [
            ("late_master_fraction", self.late_master_fraction),
            ("duplicate_fraction", self.duplicate_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        Ok(())
    }
}

/// What a generation produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub schema_preset: Preset,
    pub counts: BTreeMap<String, u64>,
    pub keys: Vec<String>,
    pub total: u64,
    /// Records placed after an operational record that depends on them.
    pub late_rows: u64,
}

impl Manifest {
    pub fn count(&self, table: &str) -> u64 {
        self.counts.get(table).copied().unwrap_or(0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorkloadError> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self).unwrap()).map_err(|e| {
            WorkloadError::Manifest {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest, WorkloadError> {
        let path = path.as_ref();
        let err = |message: String| WorkloadError::Manifest {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

/// A generated workload, in log order.
#[derive(Debug, Clone)]
pub struct Generated {
    pub records: Vec<ChangeRecord>,
    pub manifest: Manifest,
}

struct RunPlan {
    start: i64,
    end: i64,
    qty: u64,
    /// Parts per hour: the simple schema's rate, or the complex product rate.
    rate: i64,
    product: i64,
    period: usize,
}

struct InspectionPlan {
    ts: i64,
    run: usize,
    good: u64,
    defect: u64,
}

struct KeyPlan {
    equip: String,
    events: Vec<(i64, bool)>,
    periods: Vec<(i64, i64)>,
    runs: Vec<RunPlan>,
    inspections: Vec<InspectionPlan>,
    updates: usize,
    speed_pct: i64,
}

const RATES: [i64; 5] = [60, 90, 120, 180, 240];
const PRODUCTS: i64 = 12;

fn share(total: u32, keys: u32, i: u32) -> usize {
    (total / keys + u32::from(i < total % keys)) as usize
}

fn product_rate(product: i64) -> i64 {
    RATES[(product as usize - 1) % RATES.len()]
}

fn plan_key(rng: &mut ChaCha8Rng, spec: &WorkloadSpec, i: u32) -> KeyPlan {
    let n_status = share(spec.records_per_table, spec.equipment_count, i).max(2);
    let n_runs = share(spec.records_per_table, spec.equipment_count, i);
    let n_quality = share(spec.records_per_table, spec.equipment_count, i);
    let n_periods = n_status / 2;
    // The sequence ends OFF, so an odd count starts OFF.
    let first_on = n_status % 2 == 0;

    let mut per_period = vec![n_runs / n_periods; n_periods];
    let mut order: Vec<usize> = (0..n_periods).collect();
    order.shuffle(rng);
    for &p in order.iter().take(n_runs % n_periods) {
        per_period[p] += 1;
    }

    let speed_pct = [80, 90, 100][rng.gen_range(0..3)];
    let mut t = BASE_TS + i as i64 * 7 * MIN + rng.gen_range(0..10) * MIN;
    let mut events = Vec::with_capacity(n_status);
    let mut periods = Vec::with_capacity(n_periods);
    let mut runs = Vec::new();
    let mut on = first_on;
    for _ in 0..n_status {
        events.push((t, on));
        if on {
            let p = periods.len();
            let r = per_period[p] as i64;
            let len = (30 * MIN).max(r * 12 * MIN) + rng.gen_range(0..60) * MIN;
            let (a, b) = (t, t + len);
            periods.push((a, b));
            if r > 0 {
                let lo = a + MIN;
                let slot = (b - MIN - lo) / r;
                for k in 0..r {
                    let s0 = lo + k * slot;
                    let run_len = ((slot as f64 * rng.gen_range(0.5..0.9)) as i64 / 1000 * 1000).max(MIN);
                    let start = s0 + rng.gen_range(0..=(slot - run_len) / 1000) * 1000;
                    let end = start + run_len;
                    let product = rng.gen_range(1..=PRODUCTS);
                    let rate = match spec.schema_preset {
                        Preset::Simple => RATES[rng.gen_range(0..RATES.len())],
                        Preset::Complex => product_rate(product) * speed_pct / 100,
                    };
                    let hours = run_len as f64 / 3_600_000.0;
                    let qty = (hours * rate as f64 * rng.gen_range(0.4..1.08)).floor() as u64;
                    runs.push(RunPlan {
                        start,
                        end,
                        qty,
                        rate,
                        product,
                        period: p,
                    });
                }
            }
            t = b;
        } else {
            t += rng.gen_range(5..45) * MIN;
        }
        on = !on;
    }

    let n_updates = if n_quality >= 10 { n_quality / 10 } else { 0 };
    let n_insp = n_quality - n_updates;
    let mut inspections = Vec::with_capacity(n_insp);
    let mut per_run = vec![0u64; runs.len()];
    let owners: Vec<usize> = (0..n_insp)
        .map(|k| if runs.is_empty() { usize::MAX } else { k * runs.len() / n_insp })
        .collect();
    for &o in &owners {
        if o != usize::MAX {
            per_run[o] += 1;
        }
    }
    for &o in &owners {
        let (ts, good, defect) = if o == usize::MAX {
            let (a, b) = periods[rng.gen_range(0..periods.len())];
            (rng.gen_range(a..b), rng.gen_range(0..20), rng.gen_range(0..3))
        } else {
            let r = &runs[o];
            let q = r.qty / per_run[o];
            let defect = (q as f64 * rng.gen_range(0.0..0.12)).round() as u64;
            (rng.gen_range(r.start..r.end), q - defect, defect)
        };
        inspections.push(InspectionPlan {
            ts,
            run: o,
            good,
            defect,
        });
    }
    KeyPlan {
        equip: format!("E{}", i + 1),
        events,
        periods,
        runs,
        inspections,
        updates: n_updates,
        speed_pct,
    }
}

fn row(pairs: &[(&str, Scalar)]) -> Row {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn int(v: i64) -> Scalar {
    Scalar::Int(v)
}

/// One record before ordering, with what it depends on / what depends on it.
struct Draft {
    rec: ChangeRecord,
    rank: u8,
    key: Option<usize>,
    /// Span of operational time this master row influences.
    influence: Option<(i64, i64)>,
    /// Restricts dependents to runs of this order (complex orders).
    order: Option<i64>,
    movable: bool,
    /// Operational run span, for operational records.
    run: Option<(i64, i64, Option<i64>)>,
}

fn draft(table: &str, op: Op, tx: i64, r: Row, rank: u8, key: Option<usize>) -> Draft {
    Draft {
        rec: ChangeRecord::new(table, op, tx, r),
        rank,
        key,
        influence: None,
        order: None,
        movable: false,
        run: None,
    }
}

struct Ids(BTreeMap<&'static str, i64>);

impl Ids {
    fn next(&mut self, table: &'static str) -> i64 {
        let n = self.0.entry(table).or_insert(0);
        *n += 1;
        *n
    }
}

fn render_simple(plans: &[KeyPlan], rng: &mut ChaCha8Rng) -> Vec<Draft> {
    let mut ids = Ids(BTreeMap::new());
    let mut out = Vec::new();
    for (k, p) in plans.iter().enumerate() {
        let eq = Scalar::from(p.equip.as_str());
        for (j, &(ts, on)) in p.events.iter().enumerate() {
            let id = ids.next(simple::STATUS);
            let mut d = draft(
                simple::STATUS,
                Op::Insert,
                ts,
                row(&[
                    ("id", int(id)),
                    (EQUIP, eq.clone()),
                    ("status", Scalar::from(if on { "ON" } else { "OFF" })),
                    ("ts", int(ts)),
                ]),
                1,
                Some(k),
            );
            let next = p.events.get(j + 1).map_or(ts + 1, |e| e.0);
            d.influence = Some((ts, next));
            d.movable = true;
            out.push(d);
        }
        for r in &p.runs {
            let id = ids.next(simple::PRODUCTION);
            let mut d = draft(
                simple::PRODUCTION,
                Op::Insert,
                r.end,
                row(&[
                    ("id", int(id)),
                    (EQUIP, eq.clone()),
                    ("start_ts", int(r.start)),
                    ("end_ts", int(r.end)),
                    ("qty", int(r.qty as i64)),
                    ("ideal_rate", int(r.rate)),
                ]),
                9,
                Some(k),
            );
            d.run = Some((r.start, r.end, None));
            out.push(d);
        }
        let mut inserted = Vec::new();
        for q in &p.inspections {
            let id = ids.next(simple::QUALITY);
            let mut d = draft(
                simple::QUALITY,
                Op::Insert,
                q.ts,
                row(&[
                    ("id", int(id)),
                    (EQUIP, eq.clone()),
                    ("ts", int(q.ts)),
                    ("good", int(q.good as i64)),
                    ("defect", int(q.defect as i64)),
                ]),
                2,
                Some(k),
            );
            d.influence = Some((q.ts, q.ts + 1));
            d.movable = true;
            inserted.push(out.len());
            out.push(d);
        }
        for _ in 0..p.updates {
            let at = inserted[rng.gen_range(0..inserted.len())];
            out[at].movable = false;
            let mut r = out[at].rec.row.clone();
            let ts = r["ts"].as_i64().unwrap();
            let run_end = p
                .inspections
                .iter()
                .find(|q| q.ts == ts)
                .and_then(|q| p.runs.get(q.run))
                .map_or(ts, |run| run.end);
            let shift = rng.gen_range(0..3);
            let good = r["good"].as_i64().unwrap();
            r.insert("good".into(), int((good - shift).max(0)));
            r.insert("defect".into(), int(r["defect"].as_i64().unwrap() + shift));
            let tx = ts.max(run_end) + rng.gen_range(1..120) * MIN;
            out.push(draft(simple::QUALITY, Op::Update, tx, r, 2, Some(k)));
        }
    }
    out
}


fn render_complex(plans: &[KeyPlan], rng: &mut ChaCha8Rng) -> Vec<Draft> {
    let mut ids = Ids(BTreeMap::new());
    let mut out = Vec::new();
    let t0 = BASE_TS - 60 * MIN;
    for code in 1..=6 {
        out.push(draft(
            complex::STATE_CODE,
            Op::Insert,
            t0,
            row(&[
                ("id", int(code)),
                ("status", Scalar::from(if code <= 3 { "ON" } else { "OFF" })),
            ]),
            0,
            None,
        ));
    }
    for product in 1..=PRODUCTS {
        out.push(draft(
            complex::PRODUCT,
            Op::Insert,
            t0,
            row(&[("id", int(product)), ("ideal_rate", int(product_rate(product)))]),
            0,
            None,
        ));
    }
    for class in 1..=4 {
        out.push(draft(
            complex::CLASS,
            Op::Insert,
            t0,
            row(&[("id", int(class)), ("counted", Scalar::Bool(class != 4))]),
            0,
            None,
        ));
    }
    for (k, p) in plans.iter().enumerate() {
        let eq = Scalar::from(p.equip.as_str());
        let first = p.events[0].0;
        let mut d = draft(
            complex::EQUIPMENT,
            Op::Insert,
            first - MIN,
            row(&[
                ("id", eq.clone()),
                (EQUIP, eq.clone()),
                ("speed_pct", int(p.speed_pct)),
            ]),
            1,
            Some(k),
        );
        d.influence = Some((i64::MIN, i64::MAX));
        d.movable = true;
        out.push(d);
        for (j, &(ts, on)) in p.events.iter().enumerate() {
            let id = ids.next(complex::EVENT);
            let code = if on { rng.gen_range(1..=3) } else { rng.gen_range(4..=6) };
            let mut d = draft(
                complex::EVENT,
                Op::Insert,
                ts,
                row(&[
                    ("id", int(id)),
                    (EQUIP, eq.clone()),
                    ("ts", int(ts)),
                    ("state_code", int(code)),
                ]),
                2,
                Some(k),
            );
            let next = p.events.get(j + 1).map_or(ts + 1, |e| e.0);
            d.influence = Some((ts, next));
            d.movable = true;
            out.push(d);
        }
        // One order per ON period that has runs; all its runs share a product.
        let mut orders: BTreeMap<usize, (i64, i64)> = BTreeMap::new();
        for r in &p.runs {
            if let std::collections::btree_map::Entry::Vacant(e) = orders.entry(r.period) {
                let id = ids.next(complex::ORDER);
                e.insert((id, r.product));
                let mut d = draft(
                    complex::ORDER,
                    Op::Insert,
                    p.periods[r.period].0,
                    row(&[
                        ("id", int(id)),
                        (EQUIP, eq.clone()),
                        ("product_id", int(r.product)),
                    ]),
                    3,
                    Some(k),
                );
                d.influence = Some((i64::MIN, i64::MAX));
                d.order = Some(id);
                d.movable = true;
                out.push(d);
            }
        }
        for r in &p.runs {
            let (order_id, product) = orders[&r.period];
            let rate = product_rate(product) * p.speed_pct / 100;
            // Quantities were drawn against this run's own product; rescale
            // to the order's product so the performance stays plausible.
            let qty = r.qty * rate as u64 / r.rate.max(1) as u64;
            let id = ids.next(complex::RUN);
            let mut d = draft(
                complex::RUN,
                Op::Insert,
                r.end,
                row(&[
                    ("id", int(id)),
                    (EQUIP, eq.clone()),
                    ("order_id", int(order_id)),
                    ("start_ts", int(r.start)),
                    ("end_ts", int(r.end)),
                    ("qty", int(qty as i64)),
                ]),
                9,
                Some(k),
            );
            d.run = Some((r.start, r.end, Some(order_id)));
            out.push(d);
        }
        let mut results = Vec::new();
        for q in &p.inspections {
            let insp = ids.next(complex::INSPECTION);
            let mut d = draft(
                complex::INSPECTION,
                Op::Insert,
                q.ts,
                row(&[("id", int(insp)), (EQUIP, eq.clone()), ("ts", int(q.ts))]),
                4,
                Some(k),
            );
            d.influence = Some((q.ts, q.ts + 1));
            d.movable = true;
            out.push(d);
            let parts = if q.good + q.defect > 1 && rng.gen_bool(0.5) { 2 } else { 1 };
            let mut good_left = q.good;
            let mut defect_left = q.defect;
            for part in 0..parts {
                let (g, df) = if part + 1 == parts {
                    (good_left, defect_left)
                } else {
                    (good_left / 2, defect_left / 2)
                };
                good_left -= g;
                defect_left -= df;
                let id = ids.next(complex::RESULT);
                let mut d = draft(
                    complex::RESULT,
                    Op::Insert,
                    q.ts,
                    row(&[
                        ("id", int(id)),
                        (EQUIP, eq.clone()),
                        ("inspection_id", int(insp)),
                        ("class_id", int(rng.gen_range(1..=4))),
                        ("good", int(g as i64)),
                        ("defect", int(df as i64)),
                    ]),
                    5,
                    Some(k),
                );
                d.influence = Some((q.ts, q.ts + 1));
                d.movable = true;
                results.push((out.len(), q.run));
                out.push(d);
            }
        }
        for _ in 0..p.updates {
            if results.is_empty() {
                break;
            }
            let (at, run) = results[rng.gen_range(0..results.len())];
            out[at].movable = false;
            let mut r = out[at].rec.row.clone();
            let ts = out[at].rec.tx_ts;
            let run_end = p.runs.get(run).map_or(ts, |r| r.end);
            let shift = rng.gen_range(0..3);
            let good = r["good"].as_i64().unwrap();
            r.insert("good".into(), int((good - shift).max(0)));
            r.insert("defect".into(), int(r["defect"].as_i64().unwrap() + shift));
            let tx = ts.max(run_end) + rng.gen_range(1..120) * MIN;
            out.push(draft(complex::RESULT, Op::Update, tx, r, 5, Some(k)));
        }
    }
    out
}

/// Generates the workload in log order without writing it.
pub fn generate_records(spec: &WorkloadSpec) -> Result<Generated, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plans: Vec<KeyPlan> = (0..spec.equipment_count)
        .map(|i| plan_key(&mut rng, spec, i))
        .collect();
    let mut drafts = match spec.schema_preset {
        Preset::Simple => render_simple(&plans, &mut rng),
        Preset::Complex => render_complex(&plans, &mut rng),
    };
    // Chronological log order; at equal times master rows come first.
    let mut order: Vec<usize> = (0..drafts.len()).collect();
    order.sort_by_key(|&i| (drafts[i].rec.tx_ts, drafts[i].rank, i));

    // Late master rows move to just after the last operational record that
    // depends on them, keeping their transaction time.
    let mut slot: Vec<(usize, u8, usize)> = vec![(0, 0, 0); drafts.len()];
    for (pos, &i) in order.iter().enumerate() {
        slot[i] = (pos, 0, 0);
    }
    let mut late_rows = 0;
    if spec.late_master_fraction > 0.0 {
        let mut last_dep: BTreeMap<usize, Vec<(usize, i64, i64, Option<i64>)>> = BTreeMap::new();
        for (pos, &i) in order.iter().enumerate() {
            if let (Some(k), Some((s, e, o))) = (drafts[i].key, drafts[i].run) {
                last_dep.entry(k).or_default().push((pos, s, e, o));
            }
        }
        for &i in &order {
            let d = &drafts[i];
            if !d.movable || !rng.gen_bool(spec.late_master_fraction) {
                continue;
            }
            let (Some(k), Some((a, b))) = (d.key, d.influence) else {
                continue;
            };
            let dep = last_dep
                .get(&k)
                .into_iter()
                .flatten()
                .filter(|&&(_, s, e, o)| s < b && e > a && (d.order.is_none() || o == d.order))
                .map(|&(pos, ..)| pos)
                .max();
            if let Some(pos) = dep {
                if pos > slot[i].0 {
                    slot[i] = (pos, 1, i);
                    late_rows += 1;
                }
            }
        }
    }
    order.sort_by_key(|&i| slot[i]);

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut records = Vec::with_capacity(drafts.len());
    for i in order {
        let rec = std::mem::replace(&mut drafts[i].rec, ChangeRecord::new("", Op::Insert, 0, Row::new()));
        *counts.entry(rec.table.clone()).or_default() += 1;
        records.push(rec);
    }
    for cfg in spec.schema_preset.table_configs(1) {
        counts.entry(cfg.table).or_default();
    }
    Ok(Generated {
        manifest: Manifest {
            seed: spec.seed,
            schema_preset: spec.schema_preset,
            total: records.len() as u64,
            counts,
            keys: plans.iter().map(|p| p.equip.clone()).collect(),
            late_rows,
        },
        records,
    })
}

/// Generates the workload and appends it to `log`.
pub fn generate(spec: &WorkloadSpec, log: &mut CdcLogWriter) -> Result<Manifest, WorkloadError> {
    let g = generate_records(spec)?;
    log.append_all(g.records)?;
    Ok(g.manifest)
}

/// Final table contents after replaying `records` in order, keyed by row key.
pub fn replay_tables(
    records: &[ChangeRecord],
    tables: &[TableConfig],
) -> BTreeMap<String, BTreeMap<String, Row>> {
    let mut out: BTreeMap<String, BTreeMap<String, Row>> =
        tables.iter().map(|t| (t.table.clone(), BTreeMap::new())).collect();
    let cols: BTreeMap<&str, &str> = tables
        .iter()
        .map(|t| (t.table.as_str(), t.row_key_column.as_str()))
        .collect();
    for r in records {
        let Some(t) = out.get_mut(&r.table) else {
            continue;
        };
        // Records that never went through the log have no row key yet.
        let key = match &r.row_key {
            Scalar::Null => r.row.get(cols[r.table.as_str()]).and_then(Scalar::canonical_key),
            k => k.canonical_key(),
        };
        let Some(k) = key else {
            continue;
        };
        match r.op {
            Op::Delete => {
                t.remove(&k);
            }
            Op::Insert | Op::Update => {
                t.insert(k, r.row.clone());
            }
        }
    }
    out
}

/// Batch recomputation of the expected facts from a complete record set.
pub fn oracle_records(records: &[ChangeRecord], preset: Preset, window_ms: i64) -> Vec<FactRow> {
    let tables = preset.table_configs(1);
    let state = replay_tables(records, &tables);
    let op_table = preset.operational_table();
    let mut by_key: BTreeMap<String, BTreeMap<&str, Vec<&Row>>> = BTreeMap::new();
    let mut lookups: BTreeMap<&str, Vec<&Row>> = BTreeMap::new();
    for cfg in &tables {
        for r in state[&cfg.table].values() {
            if !cfg.has_business_key() {
                lookups.entry(&cfg.table).or_default().push(r);
                continue;
            }
            if cfg.nature == TableNature::Operational && preset.check_operational(r).is_err() {
                continue;
            }
            if let Some(k) = cfg.business_key_of(r) {
                by_key.entry(k).or_default().entry(&cfg.table).or_default().push(r);
            }
        }
    }
    let mut rows = Vec::new();
    for (equip, tables_of_key) in &by_key {
        let mut data = KeyData::new();
        for (t, rs) in &lookups {
            data.insert(t, rs.clone());
        }
        let mut ops: &[&Row] = &[];
        for (t, rs) in tables_of_key {
            if *t == op_table {
                ops = rs;
            } else {
                data.insert(t, rs.clone());
            }
        }
        let timeline = preset.resolve(equip, &data, ops).timeline;
        for w in timeline.window_indices(window_ms) {
            let facts = timeline
                .window_facts(w, window_ms)
                .expect("resolved timelines are well formed");
            rows.extend(facts.rows);
        }
    }
    rows.sort_by_key(|r| r.fact_id);
    rows
}

/// The oracle over a finished log directory.
pub fn oracle(log_dir: impl AsRef<Path>, preset: Preset, window_ms: i64) -> Result<Vec<FactRow>, LogError> {
    let records = read_log(log_dir, &preset.table_configs(1))?;
    Ok(oracle_records(&records, preset, window_ms))
}

/// Business keys of every keyed row, for coverage checks.
pub fn business_keys(records: &[ChangeRecord], tables: &[TableConfig]) -> BTreeSet<String> {
    let by_name: BTreeMap<&str, &TableConfig> = tables.iter().map(|t| (t.table.as_str(), t)).collect();
    records
        .iter()
        .filter_map(|r| by_name.get(r.table.as_str())?.business_key_of(&r.row))
        .collect()
}
