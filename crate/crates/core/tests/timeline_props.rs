//! Incremental window recomputation must converge to the full recomputation.

use std::collections::BTreeMap;

use nrtetl_core::fact::FactRow;
use nrtetl_core::oee::{ProductionInterval, QualityRecord, Status};
use nrtetl_core::timeline::{dirty_windows, KeyTimeline, StatusEvent};
use proptest::prelude::*;

const W: i64 = 500;

#[derive(Debug, Clone)]
enum Change {
    Status(i64, bool),
    Run(i64, i64, u64),
    Inspect(i64, u64, u64),
    DropStatus(usize),
    DropRun(usize),
}

fn change() -> impl Strategy<Value = Change> {
    prop_oneof![
        4 => (0i64..5000, any::<bool>()).prop_map(|(t, on)| Change::Status(t, on)),
        3 => (0i64..5000, 1i64..400, 0u64..100).prop_map(|(s, l, q)| Change::Run(s, s + l, q)),
        2 => (0i64..5000, 0u64..10, 0u64..3).prop_map(|(t, g, d)| Change::Inspect(t, g, d)),
        1 => any::<usize>().prop_map(Change::DropStatus),
        1 => any::<usize>().prop_map(Change::DropRun),
    ]
}

#[derive(Default, Clone)]
struct State {
    status: Vec<StatusEvent>,
    runs: Vec<ProductionInterval>,
    quality: Vec<QualityRecord>,
}

impl State {
    fn apply(&mut self, c: &Change) {
        match *c {
            Change::Status(ts, on) => {
                if self.status.iter().all(|e| e.ts != ts) {
                    self.status.push(StatusEvent {
                        ts,
                        status: if on { Status::On } else { Status::Off },
                    });
                }
            }
            Change::Run(s, e, q) => {
                // Runs of one equipment never overlap.
                if self.runs.iter().all(|r| e <= r.start_ts || s >= r.end_ts) {
                    self.runs.push(ProductionInterval {
                        equip: "E1".into(),
                        start_ts: s,
                        end_ts: e,
                        qty_produced: q,
                        theoretical_rate: 360_000.0,
                    });
                }
            }
            Change::Inspect(ts, g, d) => self.quality.push(QualityRecord {
                equip: "E1".into(),
                ts,
                good_count: g,
                defect_count: d,
            }),
            Change::DropStatus(i) => {
                if !self.status.is_empty() {
                    let i = i % self.status.len();
                    self.status.remove(i);
                }
            }
            Change::DropRun(i) => {
                if !self.runs.is_empty() {
                    let i = i % self.runs.len();
                    self.runs.remove(i);
                }
            }
        }
    }

    fn timeline(&self) -> KeyTimeline {
        KeyTimeline::new(
            "E1",
            self.status.clone(),
            self.runs.clone(),
            self.quality.clone(),
        )
    }
}

fn lines(rows: &[FactRow]) -> Vec<String> {
    rows.iter().map(FactRow::dump_line).collect()
}

fn full(t: &KeyTimeline) -> BTreeMap<i64, Vec<String>> {
    t.window_indices(W)
        .filter_map(|i| {
            let f = t.window_facts(i, W).unwrap();
            (!f.rows.is_empty()).then(|| (i, lines(&f.rows)))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn incremental_equals_full(changes in proptest::collection::vec(change(), 1..40)) {
        let mut state = State::default();
        let mut prev = state.timeline();
        let mut store: BTreeMap<i64, Vec<String>> = BTreeMap::new();
        for c in &changes {
            state.apply(c);
            let next = state.timeline();
            for i in dirty_windows(&prev, &next, W) {
                let f = next.window_facts(i, W).unwrap();
                if f.rows.is_empty() {
                    store.remove(&i);
                } else {
                    store.insert(i, lines(&f.rows));
                }
            }
            prev = next;
        }
        prop_assert_eq!(store, full(&prev));
    }

    #[test]
    fn input_order_does_not_matter(changes in proptest::collection::vec(change(), 1..30)) {
        let mut state = State::default();
        for c in &changes {
            state.apply(c);
        }
        let mut shuffled = state.clone();
        shuffled.status.reverse();
        shuffled.runs.reverse();
        shuffled.quality.reverse();
        prop_assert_eq!(full(&state.timeline()), full(&shuffled.timeline()));
    }
}
