//! Source schemas of the steelworks workload and how their rows resolve into a
//! [`KeyTimeline`].
//!
//! `Simple` keeps one table per data category. `Complex` normalizes each
//! category into header, detail and lookup tables, so resolving a key takes
//! several joins against the cached master data.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::oee::{ProductionInterval, QualityRecord, Status};
use crate::table::TableConfig;
use crate::timeline::{KeyTimeline, StatusEvent};
use crate::value::{Row, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Preset {
    Simple,
    Complex,
}

/// Business-key column shared by every keyed table.
pub const EQUIP: &str = "equip_id";

pub mod simple {
    pub const STATUS: &str = "equipment_status";
    pub const QUALITY: &str = "quality";
    pub const PRODUCTION: &str = "production";
}

pub mod complex {
    pub const RUN: &str = "prod_run";
    pub const ORDER: &str = "prod_order";
    pub const PRODUCT: &str = "product";
    pub const EVENT: &str = "equip_event";
    pub const STATE_CODE: &str = "state_code";
    pub const EQUIPMENT: &str = "equipment";
    pub const INSPECTION: &str = "qc_inspection";
    pub const RESULT: &str = "qc_result";
    pub const CLASS: &str = "qc_class";
}

/// A master row a record needs but the cache does not hold yet.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Missing {
    pub table: String,
    pub key: String,
}

impl fmt::Display for Missing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.table, self.key)
    }
}

/// Master rows visible for one business key: keyed tables hold that key's
/// rows, lookup tables hold everything.
#[derive(Debug, Default)]
pub struct KeyData<'a> {
    tables: BTreeMap<&'a str, Vec<&'a Row>>,
}

impl<'a> KeyData<'a> {
    pub fn new() -> Self {
        KeyData::default()
    }

    pub fn insert(&mut self, table: &'a str, rows: Vec<&'a Row>) {
        self.tables.insert(table, rows);
    }

    pub fn rows(&self, table: &str) -> &[&'a Row] {
        self.tables.get(table).map_or(&[], Vec::as_slice)
    }
}

/// A resolved timeline and the number of join probes it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub timeline: KeyTimeline,
    pub probes: u64,
}

fn int(row: &Row, col: &str) -> Option<i64> {
    row.get(col).and_then(Scalar::as_i64)
}

fn key(row: &Row, col: &str) -> Option<String> {
    row.get(col).and_then(Scalar::canonical_key)
}

fn index<'a>(rows: &[&'a Row], col: &str) -> BTreeMap<String, &'a Row> {
    rows.iter()
        .filter_map(|r| key(r, col).map(|k| (k, *r)))
        .collect()
}

impl Preset {
    pub fn operational_table(self) -> &'static str {
        match self {
            Preset::Simple => simple::PRODUCTION,
            Preset::Complex => complex::RUN,
        }
    }

    /// Table configuration for this schema, operational topic split into
    /// `op_partitions` partitions. Master topics keep one partition.
    pub fn table_configs(self, op_partitions: u32) -> Vec<TableConfig> {
        match self {
            Preset::Simple => alloc::vec![
                TableConfig::master(simple::STATUS, "id", EQUIP),
                TableConfig::master(simple::QUALITY, "id", EQUIP),
                TableConfig::operational(simple::PRODUCTION, "id", EQUIP, op_partitions),
            ],
            Preset::Complex => alloc::vec![
                TableConfig::master(complex::EVENT, "id", EQUIP),
                TableConfig::master(complex::STATE_CODE, "id", ""),
                TableConfig::master(complex::EQUIPMENT, "id", EQUIP),
                TableConfig::master(complex::ORDER, "id", EQUIP),
                TableConfig::master(complex::PRODUCT, "id", ""),
                TableConfig::master(complex::INSPECTION, "id", EQUIP),
                TableConfig::master(complex::RESULT, "id", EQUIP),
                TableConfig::master(complex::CLASS, "id", ""),
                TableConfig::operational(complex::RUN, "id", EQUIP, op_partitions),
            ],
        }
    }

    /// Whether `row` has every column the operational transform reads.
    pub fn check_operational(self, row: &Row) -> Result<(), String> {
        let cols: &[&str] = match self {
            Preset::Simple => &["start_ts", "end_ts", "qty", "ideal_rate"],
            Preset::Complex => &["start_ts", "end_ts", "qty", "order_id"],
        };
        for c in cols {
            let ok = match *c {
                "order_id" => key(row, c).is_some(),
                "ideal_rate" => row.get(*c).and_then(Scalar::as_f64).is_some_and(|r| r > 0.0),
                _ => int(row, c).is_some(),
            };
            if !ok {
                return Err(alloc::format!("missing or invalid column `{c}`"));
            }
        }
        let (s, e) = (int(row, "start_ts").unwrap(), int(row, "end_ts").unwrap());
        if e <= s {
            return Err(alloc::format!("empty run [{s}, {e})"));
        }
        if int(row, "qty").unwrap() < 0 {
            return Err("negative qty".into());
        }
        Ok(())
    }

    /// Checks that every master row `op_row` references is present. On
    /// success returns the number of probes spent.
    pub fn gate(self, equip: &str, data: &KeyData<'_>, op_row: &Row) -> Result<u64, Missing> {
        let start = int(op_row, "start_ts").unwrap_or(i64::MIN);
        let missing = |table: &str, k: String| Missing {
            table: table.into(),
            key: k,
        };
        match self {
            Preset::Simple => {
                let has_status = data
                    .rows(simple::STATUS)
                    .iter()
                    .any(|r| int(r, "ts").is_some_and(|ts| ts <= start));
                if has_status {
                    Ok(1)
                } else {
                    Err(missing(simple::STATUS, equip.into()))
                }
            }
            Preset::Complex => {
                let mut probes = 1;
                if !data
                    .rows(complex::EVENT)
                    .iter()
                    .any(|r| int(r, "ts").is_some_and(|ts| ts <= start))
                {
                    return Err(missing(complex::EVENT, equip.into()));
                }
                probes += 1;
                if data.rows(complex::EQUIPMENT).is_empty() {
                    return Err(missing(complex::EQUIPMENT, equip.into()));
                }
                let order_id = key(op_row, "order_id").unwrap_or_default();
                probes += 1;
                let order = data
                    .rows(complex::ORDER)
                    .iter()
                    .find(|r| key(r, "id").as_deref() == Some(order_id.as_str()))
                    .ok_or_else(|| missing(complex::ORDER, order_id.clone()))?;
                let product_id = key(order, "product_id").unwrap_or_default();
                probes += 1;
                if !data
                    .rows(complex::PRODUCT)
                    .iter()
                    .any(|r| key(r, "id").as_deref() == Some(product_id.as_str()))
                {
                    return Err(missing(complex::PRODUCT, product_id));
                }
                Ok(probes)
            }
        }
    }

    /// Joins the master rows and the processed operational rows of one key
    /// into its timeline. Rows whose references do not resolve are left out,
    /// and so are runs that would fail [`Preset::gate`].
    pub fn resolve(self, equip: &str, data: &KeyData<'_>, op_rows: &[&Row]) -> Resolved {
        match self {
            Preset::Simple => resolve_simple(equip, data, op_rows),
            Preset::Complex => resolve_complex(equip, data, op_rows),
        }
    }
}

fn run_times(row: &Row) -> Option<(i64, i64, u64)> {
    let s = int(row, "start_ts")?;
    let e = int(row, "end_ts")?;
    let q = u64::try_from(int(row, "qty")?).ok()?;
    (e > s).then_some((s, e, q))
}

fn resolve_simple(equip: &str, data: &KeyData<'_>, op_rows: &[&Row]) -> Resolved {
    let status: Vec<StatusEvent> = data
        .rows(simple::STATUS)
        .iter()
        .filter_map(|r| {
            Some(StatusEvent {
                ts: int(r, "ts")?,
                status: Status::parse(r.get("status")?.as_str()?)?,
            })
        })
        .collect();
    let first_status = status.iter().map(|e| e.ts).min();
    let production: Vec<ProductionInterval> = op_rows
        .iter()
        .filter_map(|r| {
            let (s, e, q) = run_times(r)?;
            let rate = r.get("ideal_rate")?.as_f64()?;
            (rate > 0.0 && first_status.is_some_and(|f| f <= s)).then(|| ProductionInterval {
                equip: equip.into(),
                start_ts: s,
                end_ts: e,
                qty_produced: q,
                theoretical_rate: rate,
            })
        })
        .collect();
    let quality: Vec<QualityRecord> = data
        .rows(simple::QUALITY)
        .iter()
        .filter_map(|r| {
            Some(QualityRecord {
                equip: equip.into(),
                ts: int(r, "ts")?,
                good_count: u64::try_from(int(r, "good")?).ok()?,
                defect_count: u64::try_from(int(r, "defect")?).ok()?,
            })
        })
        .collect();
    Resolved {
        probes: op_rows.len() as u64,
        timeline: KeyTimeline::new(equip.to_string(), status, production, quality),
    }
}

fn resolve_complex(equip: &str, data: &KeyData<'_>, op_rows: &[&Row]) -> Resolved {
    let mut probes = 0u64;
    let codes = index(data.rows(complex::STATE_CODE), "id");
    let products = index(data.rows(complex::PRODUCT), "id");
    let orders = index(data.rows(complex::ORDER), "id");
    let inspections = index(data.rows(complex::INSPECTION), "id");
    let classes = index(data.rows(complex::CLASS), "id");

    let mut status = Vec::new();
    for r in data.rows(complex::EVENT) {
        probes += 1;
        let ev = (|| {
            let code = codes.get(&key(r, "state_code")?)?;
            Some(StatusEvent {
                ts: int(r, "ts")?,
                status: Status::parse(code.get("status")?.as_str()?)?,
            })
        })();
        status.extend(ev);
    }
    let first_status = data
        .rows(complex::EVENT)
        .iter()
        .filter_map(|r| int(r, "ts"))
        .min();

    probes += 1;
    let speed = data
        .rows(complex::EQUIPMENT)
        .first()
        .and_then(|r| r.get("speed_pct"))
        .and_then(Scalar::as_f64);

    let mut production = Vec::new();
    if let Some(speed) = speed {
        for r in op_rows {
            probes += 2;
            let run = (|| {
                let (s, e, q) = run_times(r)?;
                if !first_status.is_some_and(|f| f <= s) {
                    return None;
                }
                let order = orders.get(&key(r, "order_id")?)?;
                let product = products.get(&key(order, "product_id")?)?;
                let rate = product.get("ideal_rate")?.as_f64()? * speed / 100.0;
                (rate > 0.0).then(|| ProductionInterval {
                    equip: equip.into(),
                    start_ts: s,
                    end_ts: e,
                    qty_produced: q,
                    theoretical_rate: rate,
                })
            })();
            production.extend(run);
        }
    }

    let mut quality = Vec::new();
    for r in data.rows(complex::RESULT) {
        probes += 2;
        let rec = (|| {
            let insp = inspections.get(&key(r, "inspection_id")?)?;
            let class = classes.get(&key(r, "class_id")?)?;
            if !class.get("counted")?.as_bool()? {
                return None;
            }
            Some(QualityRecord {
                equip: equip.into(),
                ts: int(insp, "ts")?,
                good_count: u64::try_from(int(r, "good")?).ok()?,
                defect_count: u64::try_from(int(r, "defect")?).ok()?,
            })
        })();
        quality.extend(rec);
    }
    Resolved {
        probes,
        timeline: KeyTimeline::new(equip.to_string(), status, production, quality),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::row;

    #[test]
    fn simple_gate_needs_earlier_status() {
        let st = row([
            ("id", Scalar::Int(1)),
            ("equip_id", "E1".into()),
            ("status", "ON".into()),
            ("ts", Scalar::Int(100)),
        ]);
        let prod_ok = row([("start_ts", 150i64)]);
        let prod_early = row([("start_ts", 50i64)]);
        let mut data = KeyData::new();
        assert_eq!(
            Preset::Simple.gate("E1", &data, &prod_ok),
            Err(Missing {
                table: simple::STATUS.into(),
                key: "E1".into()
            })
        );
        data.insert(simple::STATUS, alloc::vec![&st]);
        assert!(Preset::Simple.gate("E1", &data, &prod_ok).is_ok());
        assert!(Preset::Simple.gate("E1", &data, &prod_early).is_err());
    }

    #[test]
    fn complex_resolution_joins_lookups() {
        let code_on = row([("id", Scalar::Int(1)), ("status", "ON".into())]);
        let ev = row([
            ("id", Scalar::Int(10)),
            ("equip_id", "E1".into()),
            ("ts", Scalar::Int(0)),
            ("state_code", Scalar::Int(1)),
        ]);
        let ev_end = row([
            ("id", Scalar::Int(11)),
            ("equip_id", "E1".into()),
            ("ts", Scalar::Int(1000)),
            ("state_code", Scalar::Int(1)),
        ]);
        let eq = row([
            ("id", Scalar::from("E1")),
            ("equip_id", "E1".into()),
            ("speed_pct", Scalar::Int(50)),
        ]);
        let order = row([
            ("id", Scalar::Int(7)),
            ("equip_id", "E1".into()),
            ("product_id", Scalar::Int(3)),
        ]);
        let product = row([("id", Scalar::Int(3)), ("ideal_rate", Scalar::Int(200))]);
        let run = row([
            ("id", Scalar::Int(1)),
            ("equip_id", "E1".into()),
            ("order_id", Scalar::Int(7)),
            ("start_ts", Scalar::Int(10)),
            ("end_ts", Scalar::Int(20)),
            ("qty", Scalar::Int(1)),
        ]);
        let mut data = KeyData::new();
        data.insert(complex::STATE_CODE, alloc::vec![&code_on]);
        data.insert(complex::EVENT, alloc::vec![&ev, &ev_end]);
        data.insert(complex::EQUIPMENT, alloc::vec![&eq]);
        assert_eq!(
            Preset::Complex.gate("E1", &data, &run).unwrap_err().table,
            complex::ORDER
        );
        data.insert(complex::ORDER, alloc::vec![&order]);
        data.insert(complex::PRODUCT, alloc::vec![&product]);
        assert!(Preset::Complex.gate("E1", &data, &run).is_ok());
        let r = Preset::Complex.resolve("E1", &data, &[&run]);
        assert_eq!(r.timeline.production().len(), 1);
        assert_eq!(r.timeline.production()[0].theoretical_rate, 100.0);
        assert_eq!(r.timeline.status().len(), 2);
        assert!(r.probes > 0);
    }

    #[test]
    fn operational_row_checks() {
        let good = row([
            ("start_ts", Scalar::Int(1)),
            ("end_ts", Scalar::Int(2)),
            ("qty", Scalar::Int(0)),
            ("ideal_rate", Scalar::Int(60)),
        ]);
        assert!(Preset::Simple.check_operational(&good).is_ok());
        let mut bad = good.clone();
        bad.insert("end_ts".into(), Scalar::Int(1));
        assert!(Preset::Simple.check_operational(&bad).is_err());
        let mut no_rate = good;
        no_rate.remove("ideal_rate");
        assert!(Preset::Simple.check_operational(&no_rate).is_err());
    }
}
