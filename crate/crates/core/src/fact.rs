//! Star-schema fact rows and their canonical dump line.
//!
//! Line layout, comma separated, one fact per line:
//!
//! ```text
//! fact_id,equip,bucket,start_ts,end_ts,kind,qty,good,defect,availability,performance,quality,oee
//! ```
//!
//! `fact_id` is 16 lowercase hex digits, `qty` and the four ratios use six
//! decimal places, undefined ratios are written `null`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use crate::hash::Fnv1a64;
use crate::oee::{FactGrain, GrainKind, WindowSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactKind {
    Grain(GrainKind),
    /// Per-window roll-up of all grains of one equipment.
    Window,
}

impl FactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FactKind::Grain(k) => k.as_str(),
            FactKind::Window => "WINDOW",
        }
    }

    pub fn parse(s: &str) -> Option<FactKind> {
        Some(match s {
            "OFF" => FactKind::Grain(GrainKind::Off),
            "ON_IDLE" => FactKind::Grain(GrainKind::OnIdle),
            "ON_PRODUCING" => FactKind::Grain(GrainKind::OnProducing),
            "WINDOW" => FactKind::Window,
            _ => return None,
        })
    }
}

/// One row of the fact table.
#[derive(Debug, Clone, PartialEq)]
pub struct FactRow {
    pub fact_id: u64,
    pub equip: String,
    /// Start of the evaluation window (the time dimension key).
    pub bucket: i64,
    pub start_ts: i64,
    pub end_ts: i64,
    pub kind: FactKind,
    pub qty: f64,
    pub good: u64,
    pub defect: u64,
    pub availability: Option<f64>,
    pub performance: Option<f64>,
    pub quality: Option<f64>,
    pub oee: Option<f64>,
}

/// Deterministic id of the fact `(equip, start, end, kind)`.
pub fn fact_id(equip: &str, start_ts: i64, end_ts: i64, kind: FactKind) -> u64 {
    let mut h = Fnv1a64::default();
    let mut buf = String::with_capacity(equip.len() + 48);
    let _ = write!(buf, "{equip}|{start_ts}|{end_ts}|{}", kind.as_str());
    h.write(buf.as_bytes());
    h.finish()
}

impl FactRow {
    pub fn from_grain(g: &FactGrain, bucket: i64) -> FactRow {
        let kind = FactKind::Grain(g.kind);
        FactRow {
            fact_id: fact_id(&g.equip, g.start_ts, g.end_ts, kind),
            equip: g.equip.clone(),
            bucket,
            start_ts: g.start_ts,
            end_ts: g.end_ts,
            kind,
            qty: g.qty,
            good: g.good,
            defect: g.defect,
            availability: g.availability,
            performance: g.performance,
            quality: g.quality,
            oee: g.oee,
        }
    }

    pub fn from_summary(s: &WindowSummary) -> FactRow {
        FactRow {
            fact_id: fact_id(&s.equip, s.window.start, s.window.end, FactKind::Window),
            equip: s.equip.clone(),
            bucket: s.window.start,
            start_ts: s.window.start,
            end_ts: s.window.end,
            kind: FactKind::Window,
            qty: s.qty,
            good: s.good,
            defect: s.defect,
            availability: s.availability,
            performance: s.performance,
            quality: s.quality,
            oee: s.oee,
        }
    }

    /// The canonical dump line, without a trailing newline.
    pub fn dump_line(&self) -> String {
        let mut s = format!(
            "{:016x},{},{},{},{},{},{:.6},{},{}",
            self.fact_id,
            self.equip,
            self.bucket,
            self.start_ts,
            self.end_ts,
            self.kind.as_str(),
            self.qty,
            self.good,
            self.defect
        );
        for r in [self.availability, self.performance, self.quality, self.oee] {
            match r {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push_str(",null"),
            }
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<FactRow, DumpError> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != FIELDS.len() {
            return Err(DumpError::FieldCount(fields.len()));
        }
        let bad = |i: usize| DumpError::BadField {
            field: FIELDS[i],
            value: fields[i].into(),
        };
        let int = |i: usize| fields[i].parse::<i64>().map_err(|_| bad(i));
        let uint = |i: usize| fields[i].parse::<u64>().map_err(|_| bad(i));
        let ratio = |i: usize| -> Result<Option<f64>, DumpError> {
            if fields[i] == "null" {
                Ok(None)
            } else {
                fields[i].parse::<f64>().map(Some).map_err(|_| bad(i))
            }
        };
        Ok(FactRow {
            fact_id: u64::from_str_radix(fields[0], 16).map_err(|_| bad(0))?,
            equip: fields[1].into(),
            bucket: int(2)?,
            start_ts: int(3)?,
            end_ts: int(4)?,
            kind: FactKind::parse(fields[5]).ok_or_else(|| bad(5))?,
            qty: fields[6].parse::<f64>().map_err(|_| bad(6))?,
            good: uint(7)?,
            defect: uint(8)?,
            availability: ratio(9)?,
            performance: ratio(10)?,
            quality: ratio(11)?,
            oee: ratio(12)?,
        })
    }
}

/// Field names in dump order.
pub const FIELDS: [&str; 13] = [
    "fact_id",
    "equip",
    "bucket",
    "start_ts",
    "end_ts",
    "kind",
    "qty",
    "good",
    "defect",
    "availability",
    "performance",
    "quality",
    "oee",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DumpError {
    FieldCount(usize),
    BadField { field: &'static str, value: String },
}

impl fmt::Display for DumpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DumpError::FieldCount(n) => {
                write!(f, "expected {} fields, found {n}", FIELDS.len())
            }
            DumpError::BadField { field, value } => write!(f, "bad {field} value `{value}`"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FactRow {
        FactRow {
            fact_id: fact_id("E1", 0, 100, FactKind::Window),
            equip: "E1".into(),
            bucket: 0,
            start_ts: 0,
            end_ts: 100,
            kind: FactKind::Window,
            qty: 40.0,
            good: 36,
            defect: 4,
            availability: Some(0.8),
            performance: Some(2.0 / 3.0),
            quality: Some(0.9),
            oee: None,
        }
    }

    #[test]
    fn dump_line_layout() {
        let line = sample().dump_line();
        assert!(line.ends_with(",E1,0,0,100,WINDOW,40.000000,36,4,0.800000,0.666667,0.900000,null"));
        assert_eq!(line.split(',').next().unwrap().len(), 16);
    }

    #[test]
    fn parse_reads_back() {
        let row = FactRow::parse_line(&sample().dump_line()).unwrap();
        assert_eq!(row.fact_id, sample().fact_id);
        assert_eq!(row.kind, FactKind::Window);
        assert_eq!(row.oee, None);
        assert_eq!(row.performance, Some(0.666667));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(FactRow::parse_line("a,b"), Err(DumpError::FieldCount(2)));
    }

    #[test]
    fn fact_id_depends_on_every_part() {
        let base = fact_id("E1", 0, 10, FactKind::Window);
        assert_ne!(base, fact_id("E2", 0, 10, FactKind::Window));
        assert_ne!(base, fact_id("E1", 1, 10, FactKind::Window));
        assert_ne!(base, fact_id("E1", 0, 11, FactKind::Window));
        assert_ne!(base, fact_id("E1", 0, 10, FactKind::Grain(GrainKind::Off)));
    }
}
