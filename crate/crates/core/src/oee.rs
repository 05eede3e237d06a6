//! Fact-grain splitting of equipment status, production and quality data, and
//! the Availability / Performance / Quality / OEE indicators.
//!
//! All times are milliseconds. Theoretical rates are given in parts per hour
//! and normalized to parts per millisecond internally.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub const MS_PER_HOUR: f64 = 3_600_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    On,
    Off,
}

impl Status {
    pub fn parse(s: &str) -> Option<Status> {
        match s {
            "ON" | "on" => Some(Status::On),
            "OFF" | "off" => Some(Status::Off),
            _ => None,
        }
    }
}

/// Equipment status over `[start_ts, end_ts)`; `end_ts = None` is open.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusInterval {
    pub equip: String,
    pub status: Status,
    pub start_ts: i64,
    pub end_ts: Option<i64>,
}

/// One production run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductionInterval {
    pub equip: String,
    pub start_ts: i64,
    pub end_ts: i64,
    pub qty_produced: u64,
    /// Maximum theoretical speed, parts per hour.
    pub theoretical_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityRecord {
    pub equip: String,
    pub ts: i64,
    pub good_count: u64,
    pub defect_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GrainKind {
    Off,
    OnIdle,
    OnProducing,
}

impl GrainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GrainKind::Off => "OFF",
            GrainKind::OnIdle => "ON_IDLE",
            GrainKind::OnProducing => "ON_PRODUCING",
        }
    }

    pub fn is_on(self) -> bool {
        !matches!(self, GrainKind::Off)
    }
}

/// Smallest time intersection of status, production and quality data for one
/// equipment.
#[derive(Debug, Clone, PartialEq)]
pub struct FactGrain {
    pub equip: String,
    pub start_ts: i64,
    pub end_ts: i64,
    pub kind: GrainKind,
    /// Produced parts apportioned to this grain by overlap duration.
    pub qty: f64,
    /// Parts the overlapping run would make at its theoretical rate during
    /// this grain. Zero outside production.
    pub ideal_qty: f64,
    pub good: u64,
    pub defect: u64,
    pub availability: Option<f64>,
    pub performance: Option<f64>,
    pub quality: Option<f64>,
    pub oee: Option<f64>,
    /// Set by [`kpis`] when the actual rate exceeded the theoretical one.
    pub clamped: bool,
}

impl FactGrain {
    pub fn duration_ms(&self) -> i64 {
        self.end_ts - self.start_ts
    }
}

/// Half-open evaluation window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Self {
        Window { start, end }
    }

    pub fn len(&self) -> i64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    fn clip(&self, start: i64, end: i64) -> Option<(i64, i64)> {
        let s = start.max(self.start);
        let e = end.min(self.end);
        (s < e).then_some((s, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OeeError {
    EmptyWindow,
    InvalidInterval { start_ts: i64, end_ts: i64 },
    OverlappingProduction { first_end: i64, second_start: i64 },
    OverlappingStatus { first_end: i64, second_start: i64 },
    NonPositiveRate(f64),
    ZeroDurationGrain(i64),
    NonPositivePlannedTime(i64),
}

impl fmt::Display for OeeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OeeError::EmptyWindow => f.write_str("evaluation window is empty"),
            OeeError::InvalidInterval { start_ts, end_ts } => {
                write!(f, "interval [{start_ts}, {end_ts}) is empty or reversed")
            }
            OeeError::OverlappingProduction {
                first_end,
                second_start,
            } => write!(
                f,
                "production runs overlap: one ends at {first_end}, next starts at {second_start}"
            ),
            OeeError::OverlappingStatus {
                first_end,
                second_start,
            } => write!(
                f,
                "status intervals overlap: one ends at {first_end}, next starts at {second_start}"
            ),
            OeeError::NonPositiveRate(r) => write!(f, "theoretical rate {r} is not positive"),
            OeeError::ZeroDurationGrain(t) => write!(f, "zero-duration grain at {t}"),
            OeeError::NonPositivePlannedTime(t) => write!(f, "planned time {t} ms is not positive"),
        }
    }
}

/// Grains plus the diagnostics collected while splitting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitOutput {
    pub grains: Vec<FactGrain>,
    /// Milliseconds with no status information, counted as OFF.
    pub status_gap_ms: i64,
    /// Quality records whose timestamp fell outside every grain.
    pub unattributed_quality: usize,
}

/// Splits one equipment's data within `window` into fact grains.
///
/// Grain boundaries are the distinct endpoints of the status and production
/// intervals clipped to the window; grains tile `[min endpoint, max endpoint)`.
/// Time inside that span with no status is treated as OFF. Production
/// quantities are apportioned by overlap with the run's full span, and each
/// quality record goes to the grain containing its timestamp.
pub fn split(
    status: &[StatusInterval],
    prod: &[ProductionInterval],
    qual: &[QualityRecord],
    window: Window,
) -> Result<SplitOutput, OeeError> {
    if window.is_empty() {
        return Err(OeeError::EmptyWindow);
    }

    let mut st: Vec<(i64, i64, Status)> = Vec::with_capacity(status.len());
    for s in status {
        let end = s.end_ts.unwrap_or(window.end);
        if let Some(e) = s.end_ts {
            if e <= s.start_ts {
                return Err(OeeError::InvalidInterval {
                    start_ts: s.start_ts,
                    end_ts: e,
                });
            }
        }
        if let Some((a, b)) = window.clip(s.start_ts, end) {
            st.push((a, b, s.status));
        }
    }
    st.sort_by_key(|&(a, b, _)| (a, b));
    for w in st.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(OeeError::OverlappingStatus {
                first_end: w[0].1,
                second_start: w[1].0,
            });
        }
    }

    let mut pr: Vec<(i64, i64, &ProductionInterval)> = Vec::with_capacity(prod.len());
    for p in prod {
        if p.end_ts <= p.start_ts {
            return Err(OeeError::InvalidInterval {
                start_ts: p.start_ts,
                end_ts: p.end_ts,
            });
        }
        if !(p.theoretical_rate > 0.0) {
            return Err(OeeError::NonPositiveRate(p.theoretical_rate));
        }
        if let Some((a, b)) = window.clip(p.start_ts, p.end_ts) {
            pr.push((a, b, p));
        }
    }
    pr.sort_by_key(|&(a, b, _)| (a, b));
    for w in pr.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(OeeError::OverlappingProduction {
                first_end: w[0].1,
                second_start: w[1].0,
            });
        }
    }

    let mut bounds: Vec<i64> = Vec::with_capacity(2 * (st.len() + pr.len()));
    for &(a, b, _) in &st {
        bounds.push(a);
        bounds.push(b);
    }
    for &(a, b, _) in &pr {
        bounds.push(a);
        bounds.push(b);
    }
    bounds.sort_unstable();
    bounds.dedup();

    let equip = status
        .first()
        .map(|s| s.equip.clone())
        .or_else(|| prod.first().map(|p| p.equip.clone()))
        .unwrap_or_default();

    let mut out = SplitOutput::default();
    let (mut si, mut pi) = (0usize, 0usize);
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        while si < st.len() && st[si].1 <= a {
            si += 1;
        }
        while pi < pr.len() && pr[pi].1 <= a {
            pi += 1;
        }
        let status_here = (si < st.len() && st[si].0 <= a).then(|| st[si].2);
        let run = (pi < pr.len() && pr[pi].0 <= a).then(|| pr[pi].2);
        let on = match status_here {
            Some(s) => s == Status::On,
            None => {
                out.status_gap_ms += b - a;
                false
            }
        };
        let kind = match (on, run.is_some()) {
            (false, _) => GrainKind::Off,
            (true, false) => GrainKind::OnIdle,
            (true, true) => GrainKind::OnProducing,
        };
        let dur = (b - a) as f64;
        let (qty, ideal_qty) = match run {
            Some(p) => {
                let full = (p.end_ts - p.start_ts) as f64;
                (
                    p.qty_produced as f64 * dur / full,
                    p.theoretical_rate / MS_PER_HOUR * dur,
                )
            }
            None => (0.0, 0.0),
        };
        out.grains.push(FactGrain {
            equip: equip.clone(),
            start_ts: a,
            end_ts: b,
            kind,
            qty,
            ideal_qty,
            good: 0,
            defect: 0,
            availability: None,
            performance: None,
            quality: None,
            oee: None,
            clamped: false,
        });
    }

    for q in qual {
        let idx = out
            .grains
            .partition_point(|g| g.end_ts <= q.ts);
        match out.grains.get_mut(idx) {
            Some(g) if g.start_ts <= q.ts => {
                g.good += q.good_count;
                g.defect += q.defect_count;
            }
            _ => out.unattributed_quality += 1,
        }
    }
    Ok(out)
}

/// Fills in the indicators of one grain for an evaluation window of
/// `planned_time_ms`.
///
/// Availability is the grain's uptime share of planned time (zero for OFF
/// grains). Performance is defined for producing grains only, as actual over
/// theoretical rate clamped to 1. Quality is good over inspected parts when
/// any were inspected. OEE is their product when all three exist.
pub fn kpis(mut grain: FactGrain, planned_time_ms: i64) -> Result<FactGrain, OeeError> {
    if planned_time_ms <= 0 {
        return Err(OeeError::NonPositivePlannedTime(planned_time_ms));
    }
    let dur = grain.duration_ms();
    if dur <= 0 {
        return Err(OeeError::ZeroDurationGrain(grain.start_ts));
    }
    let planned = planned_time_ms as f64;
    grain.availability = Some(if grain.kind.is_on() {
        dur as f64 / planned
    } else {
        0.0
    });
    grain.clamped = false;
    grain.performance = if grain.kind == GrainKind::OnProducing && grain.ideal_qty > 0.0 {
        let ratio = grain.qty / grain.ideal_qty;
        if ratio > 1.0 {
            grain.clamped = true;
            Some(1.0)
        } else {
            Some(ratio)
        }
    } else {
        None
    };
    let inspected = grain.good + grain.defect;
    grain.quality = (inspected > 0).then(|| grain.good as f64 / inspected as f64);
    grain.oee = compose(grain.availability, grain.performance, grain.quality);
    Ok(grain)
}

fn compose(a: Option<f64>, p: Option<f64>, q: Option<f64>) -> Option<f64> {
    Some(a? * p? * q?)
}

/// Window-level indicators for one equipment.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSummary {
    pub equip: String,
    pub window: Window,
    pub qty: f64,
    pub good: u64,
    pub defect: u64,
    pub availability: Option<f64>,
    pub performance: Option<f64>,
    pub quality: Option<f64>,
    pub oee: Option<f64>,
}

/// Pools grain numerators and denominators over the window. Ratios are never
/// averaged.
pub fn aggregate(equip: &str, grains: &[FactGrain], window: Window) -> WindowSummary {
    let mut s = WindowSummary {
        equip: equip.into(),
        window,
        qty: 0.0,
        good: 0,
        defect: 0,
        availability: None,
        performance: None,
        quality: None,
        oee: None,
    };
    if grains.is_empty() || window.is_empty() {
        return s;
    }
    let mut uptime = 0i64;
    let mut effective = 0.0f64;
    let mut ideal = 0.0f64;
    for g in grains {
        s.qty += g.qty;
        s.good += g.good;
        s.defect += g.defect;
        if g.kind.is_on() {
            uptime += g.duration_ms();
        }
        if g.kind == GrainKind::OnProducing && g.ideal_qty > 0.0 {
            effective += g.qty.min(g.ideal_qty);
            ideal += g.ideal_qty;
        }
    }
    s.availability = Some(uptime as f64 / window.len() as f64);
    s.performance = (ideal > 0.0).then(|| effective / ideal);
    let inspected = s.good + s.defect;
    s.quality = (inspected > 0).then(|| s.good as f64 / inspected as f64);
    s.oee = compose(s.availability, s.performance, s.quality);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const MIN: i64 = 60_000;

    fn st(status: Status, a: i64, b: i64) -> StatusInterval {
        StatusInterval {
            equip: "E1".into(),
            status,
            start_ts: a,
            end_ts: Some(b),
        }
    }

    fn run(a: i64, b: i64, qty: u64, rate: f64) -> ProductionInterval {
        ProductionInterval {
            equip: "E1".into(),
            start_ts: a,
            end_ts: b,
            qty_produced: qty,
            theoretical_rate: rate,
        }
    }

    fn kinds(out: &SplitOutput) -> Vec<(GrainKind, i64, i64)> {
        out.grains
            .iter()
            .map(|g| (g.kind, g.start_ts, g.end_ts))
            .collect()
    }

    #[test]
    fn off_then_on_with_production() {
        let out = split(
            &[st(Status::Off, 0, 100), st(Status::On, 100, 200)],
            &[run(120, 180, 6, 3_600_000.0)],
            &[],
            Window::new(0, 200),
        )
        .unwrap();
        assert_eq!(
            kinds(&out),
            vec![
                (GrainKind::Off, 0, 100),
                (GrainKind::OnIdle, 100, 120),
                (GrainKind::OnProducing, 120, 180),
                (GrainKind::OnIdle, 180, 200),
            ]
        );
        assert_eq!(out.grains[2].qty, 6.0);
    }

    #[test]
    fn status_only_window() {
        let out = split(&[st(Status::On, 0, 500)], &[], &[], Window::new(0, 500)).unwrap();
        assert_eq!(kinds(&out), vec![(GrainKind::OnIdle, 0, 500)]);
    }

    #[test]
    fn open_status_runs_to_window_end() {
        let open = StatusInterval {
            end_ts: None,
            ..st(Status::On, 50, 0)
        };
        let out = split(&[open], &[], &[], Window::new(0, 100)).unwrap();
        assert_eq!(kinds(&out), vec![(GrainKind::OnIdle, 50, 100)]);
    }

    #[test]
    fn status_gap_is_off() {
        let out = split(
            &[st(Status::On, 0, 10), st(Status::On, 20, 30)],
            &[],
            &[],
            Window::new(0, 30),
        )
        .unwrap();
        assert_eq!(out.grains[1].kind, GrainKind::Off);
        assert_eq!(out.status_gap_ms, 10);
    }

    #[test]
    fn overlapping_runs_rejected() {
        let err = split(
            &[st(Status::On, 0, 100)],
            &[run(0, 50, 1, 1.0), run(40, 60, 1, 1.0)],
            &[],
            Window::new(0, 100),
        )
        .unwrap_err();
        assert!(matches!(err, OeeError::OverlappingProduction { .. }));
    }

    #[test]
    fn qty_apportioned_against_full_run() {
        // Run spans two windows; each side gets its share.
        let p = [run(50, 150, 10, 1.0)];
        let s = [st(Status::On, 0, 200)];
        let left = split(&s, &p, &[], Window::new(0, 100)).unwrap();
        let right = split(&s, &p, &[], Window::new(100, 200)).unwrap();
        let total: f64 = left
            .grains
            .iter()
            .chain(&right.grains)
            .map(|g| g.qty)
            .sum();
        assert_eq!(total, 10.0);
    }

    #[test]
    fn quality_goes_to_containing_grain() {
        let q = QualityRecord {
            equip: "E1".into(),
            ts: 130,
            good_count: 9,
            defect_count: 1,
        };
        let out = split(
            &[st(Status::On, 100, 200)],
            &[run(120, 180, 6, 1.0)],
            &[q],
            Window::new(0, 200),
        )
        .unwrap();
        let g = out
            .grains
            .iter()
            .find(|g| g.kind == GrainKind::OnProducing)
            .unwrap();
        assert_eq!((g.good, g.defect), (9, 1));
    }

    #[test]
    fn perfect_production() {
        let out = split(
            &[st(Status::On, 0, 60 * MIN)],
            &[run(0, 60 * MIN, 120, 120.0)],
            &[QualityRecord {
                equip: "E1".into(),
                ts: 10,
                good_count: 120,
                defect_count: 0,
            }],
            Window::new(0, 60 * MIN),
        )
        .unwrap();
        let g = kpis(out.grains[0].clone(), 60 * MIN).unwrap();
        assert_eq!(g.availability, Some(1.0));
        assert_eq!(g.performance, Some(1.0));
        assert_eq!(g.quality, Some(1.0));
        assert_eq!(g.oee, Some(1.0));
    }

    #[test]
    fn off_grain_indicators() {
        let out = split(&[st(Status::Off, 0, 10)], &[], &[], Window::new(0, 100)).unwrap();
        let g = kpis(out.grains[0].clone(), 100).unwrap();
        assert_eq!(g.availability, Some(0.0));
        assert_eq!(g.performance, None);
        assert_eq!(g.quality, None);
        assert_eq!(g.oee, None);
    }

    #[test]
    fn zero_duration_grain_rejected() {
        let out = split(&[st(Status::On, 0, 10)], &[], &[], Window::new(0, 10)).unwrap();
        let mut g = out.grains[0].clone();
        g.end_ts = g.start_ts;
        assert_eq!(kpis(g, 10), Err(OeeError::ZeroDurationGrain(0)));
    }

    #[test]
    fn performance_clamps() {
        let out = split(
            &[st(Status::On, 0, MS_PER_HOUR as i64)],
            &[run(0, MS_PER_HOUR as i64, 20, 10.0)],
            &[],
            Window::new(0, MS_PER_HOUR as i64),
        )
        .unwrap();
        let g = kpis(out.grains[0].clone(), MS_PER_HOUR as i64).unwrap();
        assert_eq!(g.performance, Some(1.0));
        assert!(g.clamped);
    }

    #[test]
    fn empty_aggregate_is_null() {
        let s = aggregate("E1", &[], Window::new(0, 10));
        assert_eq!(s.availability, None);
        assert_eq!(s.oee, None);
    }

    #[test]
    fn aggregate_pools_performance() {
        // Two equal-length producing grains at 0.5 and 1.0 of ideal.
        let h = MS_PER_HOUR as i64;
        let out = split(
            &[st(Status::On, 0, 2 * h)],
            &[run(0, h, 5, 10.0), run(h, 2 * h, 10, 10.0)],
            &[],
            Window::new(0, 2 * h),
        )
        .unwrap();
        let grains: Vec<_> = out
            .grains
            .into_iter()
            .map(|g| kpis(g, 2 * h).unwrap())
            .collect();
        assert_eq!(grains[0].performance, Some(0.5));
        assert_eq!(grains[1].performance, Some(1.0));
        let s = aggregate("E1", &grains, Window::new(0, 2 * h));
        assert_eq!(s.performance, Some(0.75));
    }

    #[test]
    fn single_grain_summary_matches_grain() {
        let out = split(
            &[st(Status::On, 0, 80 * MIN)],
            &[run(0, 80 * MIN, 40, 45.0)],
            &[QualityRecord {
                equip: "E1".into(),
                ts: 0,
                good_count: 36,
                defect_count: 4,
            }],
            Window::new(0, 100 * MIN),
        )
        .unwrap();
        let g = kpis(out.grains[0].clone(), 100 * MIN).unwrap();
        let s = aggregate("E1", core::slice::from_ref(&g), Window::new(0, 100 * MIN));
        assert_eq!(s.availability, g.availability);
        assert_eq!(s.performance, g.performance);
        assert_eq!(s.quality, g.quality);
        assert_eq!(s.oee, g.oee);
    }
}
