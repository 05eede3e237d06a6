//! Per-equipment timeline and its evaluation windows.
//!
//! A [`KeyTimeline`] is everything known about one business key: the status
//! change events, the production runs and the quality inspections. Its facts
//! are computed window by window, so a change only forces recomputation of
//! the windows [`dirty_windows`] reports.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::fact::FactRow;
use crate::oee::{
    aggregate, kpis, split, OeeError, ProductionInterval, QualityRecord, Status, StatusInterval,
    Window,
};

/// A status change: from `ts` on, the equipment is `status`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct StatusEvent {
    pub ts: i64,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyTimeline {
    equip: String,
    status: Vec<StatusEvent>,
    production: Vec<ProductionInterval>,
    quality: Vec<QualityRecord>,
}

/// Facts of one window plus split diagnostics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowFacts {
    pub rows: Vec<FactRow>,
    pub clamped: usize,
    pub status_gap_ms: i64,
    pub unattributed_quality: usize,
}

fn cmp_run(a: &ProductionInterval, b: &ProductionInterval) -> Ordering {
    (a.start_ts, a.end_ts, a.qty_produced)
        .cmp(&(b.start_ts, b.end_ts, b.qty_produced))
        .then_with(|| a.theoretical_rate.total_cmp(&b.theoretical_rate))
}

fn cmp_quality(a: &QualityRecord, b: &QualityRecord) -> Ordering {
    (a.ts, a.good_count, a.defect_count).cmp(&(b.ts, b.good_count, b.defect_count))
}

/// Window index containing `ts`.
pub fn window_index(ts: i64, width: i64) -> i64 {
    ts.div_euclid(width)
}

pub fn window_at(index: i64, width: i64) -> Window {
    Window::new(index * width, (index + 1) * width)
}

impl KeyTimeline {
    /// Builds a timeline; inputs are sorted into canonical order so equal
    /// contents always give identical facts.
    pub fn new(
        equip: impl Into<String>,
        mut status: Vec<StatusEvent>,
        mut production: Vec<ProductionInterval>,
        mut quality: Vec<QualityRecord>,
    ) -> Self {
        status.sort();
        production.sort_by(cmp_run);
        quality.sort_by(cmp_quality);
        KeyTimeline {
            equip: equip.into(),
            status,
            production,
            quality,
        }
    }

    pub fn empty(equip: impl Into<String>) -> Self {
        KeyTimeline {
            equip: equip.into(),
            ..Default::default()
        }
    }

    pub fn equip(&self) -> &str {
        &self.equip
    }

    pub fn status(&self) -> &[StatusEvent] {
        &self.status
    }

    pub fn production(&self) -> &[ProductionInterval] {
        &self.production
    }

    pub fn quality(&self) -> &[QualityRecord] {
        &self.quality
    }

    /// `[first endpoint, last endpoint)` over status events and runs.
    pub fn extent(&self) -> Option<Window> {
        let starts = self
            .status
            .first()
            .map(|e| e.ts)
            .into_iter()
            .chain(self.production.iter().map(|p| p.start_ts));
        let ends = self
            .status
            .last()
            .map(|e| e.ts)
            .into_iter()
            .chain(self.production.iter().map(|p| p.end_ts));
        let start = starts.min()?;
        let end = ends.max()?;
        (end > start).then_some(Window::new(start, end))
    }

    /// Consecutive status events as intervals; the last one is closed at
    /// `until`. Zero-length intervals are dropped.
    pub fn status_intervals(&self, until: i64) -> Vec<StatusInterval> {
        let mut out = Vec::with_capacity(self.status.len());
        for (i, e) in self.status.iter().enumerate() {
            let end = self.status.get(i + 1).map_or(until, |n| n.ts);
            if end > e.ts {
                out.push(StatusInterval {
                    equip: self.equip.clone(),
                    status: e.status,
                    start_ts: e.ts,
                    end_ts: Some(end),
                });
            }
        }
        out
    }

    /// Indices of the windows intersecting the extent.
    pub fn window_indices(&self, width: i64) -> core::ops::Range<i64> {
        match self.extent() {
            Some(w) => window_index(w.start, width)..window_index(w.end - 1, width) + 1,
            None => 0..0,
        }
    }

    /// Grain facts and the window summary for window `index`. A window
    /// without any grain has no facts at all.
    pub fn window_facts(&self, index: i64, width: i64) -> Result<WindowFacts, OeeError> {
        let window = window_at(index, width);
        let Some(extent) = self.extent() else {
            return Ok(WindowFacts::default());
        };
        if window.end <= extent.start || window.start >= extent.end {
            return Ok(WindowFacts::default());
        }
        let status: Vec<StatusInterval> = self
            .status_intervals(extent.end)
            .into_iter()
            .filter(|s| s.start_ts < window.end && s.end_ts.map_or(true, |e| e > window.start))
            .collect();
        let prod: Vec<ProductionInterval> = self
            .production
            .iter()
            .filter(|p| p.start_ts < window.end && p.end_ts > window.start)
            .cloned()
            .collect();
        let lo = self.quality.partition_point(|q| q.ts < window.start);
        let hi = self.quality.partition_point(|q| q.ts < window.end);
        let out = split(&status, &prod, &self.quality[lo..hi], window)?;
        let mut facts = WindowFacts {
            rows: Vec::with_capacity(out.grains.len() + 1),
            clamped: 0,
            status_gap_ms: out.status_gap_ms,
            unattributed_quality: out.unattributed_quality,
        };
        if out.grains.is_empty() {
            return Ok(facts);
        }
        let mut grains = Vec::with_capacity(out.grains.len());
        for mut g in out.grains {
            g.equip.clone_from(&self.equip);
            let g = kpis(g, width)?;
            facts.clamped += usize::from(g.clamped);
            facts.rows.push(FactRow::from_grain(&g, window.start));
            grains.push(g);
        }
        let summary = aggregate(&self.equip, &grains, window);
        facts.rows.push(FactRow::from_summary(&summary));
        Ok(facts)
    }
}

/// Windows whose facts may differ between `old` and `new`.
///
/// A status change at `t` recolors time up to the next status event in either
/// timeline; a run change touches its whole span; an inspection touches its
/// own instant; an extent change touches the stretch between the two ends.
pub fn dirty_windows(old: &KeyTimeline, new: &KeyTimeline, width: i64) -> BTreeSet<i64> {
    let mut ranges: Vec<(i64, i64)> = Vec::new();
    let (oe, ne) = (old.extent(), new.extent());
    match (oe, ne) {
        (Some(o), Some(n)) => {
            ranges.push((o.end.min(n.end), o.end.max(n.end)));
            ranges.push((o.start.min(n.start), o.start.max(n.start)));
        }
        (Some(w), None) | (None, Some(w)) => ranges.push((w.start, w.end)),
        (None, None) => {}
    }
    let cap = oe
        .into_iter()
        .chain(ne)
        .map(|w| w.end)
        .max()
        .unwrap_or(i64::MIN);

    let changed_status = sym_diff(&old.status, &new.status, |a, b| a.cmp(b));
    if !changed_status.is_empty() {
        let mut all_ts: Vec<i64> = old
            .status
            .iter()
            .chain(&new.status)
            .map(|e| e.ts)
            .collect();
        all_ts.sort_unstable();
        all_ts.dedup();
        for e in changed_status {
            let next = all_ts[all_ts.partition_point(|&t| t <= e.ts)..]
                .first()
                .copied()
                .unwrap_or(cap);
            ranges.push((e.ts, next.min(cap).max(e.ts)));
        }
    }
    for p in sym_diff(&old.production, &new.production, cmp_run) {
        ranges.push((p.start_ts, p.end_ts));
    }
    for q in sym_diff(&old.quality, &new.quality, cmp_quality) {
        ranges.push((q.ts, q.ts + 1));
    }

    let mut out = BTreeSet::new();
    for (a, b) in ranges {
        if a < b {
            out.extend(window_index(a, width)..=window_index(b - 1, width));
        }
    }
    out
}

/// Elements present in one sorted slice but not the other, with multiplicity.
fn sym_diff<'a, T>(
    a: &'a [T],
    b: &'a [T],
    cmp: impl Fn(&T, &T) -> Ordering,
) -> Vec<&'a T> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match cmp(&a[i], &b[j]) {
            Ordering::Less => {
                out.push(&a[i]);
                i += 1;
            }
            Ordering::Greater => {
                out.push(&b[j]);
                j += 1;
            }
            Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend(&a[i..]);
    out.extend(&b[j..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fact::FactKind;
    use crate::oee::GrainKind;
    use alloc::vec;

    const W: i64 = 1000;

    fn ev(ts: i64, on: bool) -> StatusEvent {
        StatusEvent {
            ts,
            status: if on { Status::On } else { Status::Off },
        }
    }

    fn run(a: i64, b: i64, qty: u64) -> ProductionInterval {
        ProductionInterval {
            equip: "E1".into(),
            start_ts: a,
            end_ts: b,
            qty_produced: qty,
            theoretical_rate: 3_600_000.0,
        }
    }

    #[test]
    fn extent_and_windows() {
        let t = KeyTimeline::new("E1", vec![ev(0, true), ev(2500, false)], vec![], vec![]);
        assert_eq!(t.extent(), Some(Window::new(0, 2500)));
        assert_eq!(t.window_indices(W), 0..3);
    }

    #[test]
    fn single_event_has_no_extent() {
        let t = KeyTimeline::new("E1", vec![ev(5, true)], vec![], vec![]);
        assert_eq!(t.extent(), None);
        assert!(t.window_facts(0, W).unwrap().rows.is_empty());
    }

    #[test]
    fn window_facts_end_with_summary() {
        let t = KeyTimeline::new(
            "E1",
            vec![ev(0, false), ev(100, true), ev(1000, false)],
            vec![run(120, 180, 60)],
            vec![],
        );
        let f = t.window_facts(0, W).unwrap();
        let kinds: Vec<FactKind> = f.rows.iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![
                FactKind::Grain(GrainKind::Off),
                FactKind::Grain(GrainKind::OnIdle),
                FactKind::Grain(GrainKind::OnProducing),
                FactKind::Grain(GrainKind::OnIdle),
                FactKind::Window,
            ]
        );
        assert!(f.rows.iter().all(|r| r.equip == "E1" && r.bucket == 0));
    }

    #[test]
    fn appended_event_dirties_only_the_tail() {
        let old = KeyTimeline::new("E1", vec![ev(0, true), ev(4200, false)], vec![], vec![]);
        let new = KeyTimeline::new(
            "E1",
            vec![ev(0, true), ev(4200, false), ev(5100, true)],
            vec![],
            vec![],
        );
        let d = dirty_windows(&old, &new, W);
        assert_eq!(d.into_iter().collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn inserted_run_dirties_its_span() {
        let base = vec![ev(0, true), ev(9000, false)];
        let old = KeyTimeline::new("E1", base.clone(), vec![], vec![]);
        let new = KeyTimeline::new("E1", base, vec![run(2500, 3100, 5)], vec![]);
        let d: Vec<i64> = dirty_windows(&old, &new, W).into_iter().collect();
        assert_eq!(d, vec![2, 3]);
    }

    #[test]
    fn identical_timelines_are_clean() {
        let t = KeyTimeline::new("E1", vec![ev(0, true), ev(10, false)], vec![], vec![]);
        assert!(dirty_windows(&t, &t.clone(), W).is_empty());
    }
}
