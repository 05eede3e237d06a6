use std::collections::BTreeMap;

use nrtetl::broker::{Broker, BrokerError, Poll};
use nrtetl_core::assign::TopicPartition;
use nrtetl_core::hash::partition_for;
use nrtetl_core::table::TableNature;
use proptest::prelude::*;

fn broker(parts: u32, nature: TableNature) -> Broker {
    let b = Broker::in_memory();
    b.create_topic("t", parts, nature).unwrap();
    b
}

fn settle(b: &Broker, members: &[&str]) -> BTreeMap<String, Vec<u32>> {
    let mut out = BTreeMap::new();
    for _ in 0..10 {
        for m in members {
            if let Poll::Assigned(a) = b.poll("g", m, 0).unwrap() {
                out.insert(m.to_string(), a.partitions.iter().map(|tp| tp.partition).collect());
            }
        }
        if out.len() == members.len() {
            break;
        }
    }
    out
}

fn drain(b: &Broker, member: &str) -> Vec<(u32, u64, String)> {
    let mut out = Vec::new();
    loop {
        match b.poll("g", member, 100).unwrap() {
            Poll::Messages(m) if m.is_empty() => return out,
            Poll::Messages(m) => out.extend(m.iter().map(|m| (m.partition, m.offset, m.payload.clone()))),
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn keys_land_in_their_hash_partition() {
    let b = broker(20, TableNature::Operational);
    let mut transcript = Vec::new();
    for i in 0..2_000u32 {
        let key = format!("E{}", i % 20 + 1);
        let (p, _) = b.publish("t", &key, format!("\"{i}\""), false).unwrap();
        transcript.push((key, p, i));
    }
    // Brute-force re-partition of the transcript.
    let mut expected: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for (key, p, i) in &transcript {
        assert_eq!(*p, partition_for(key, 20));
        expected.entry(*p).or_default().push(format!("\"{i}\""));
    }
    for p in 0..20 {
        let got: Vec<String> = b.fetch("t", p, 0, usize::MAX).unwrap().iter().map(|m| m.payload.clone()).collect();
        assert_eq!(got, expected.get(&p).cloned().unwrap_or_default(), "partition {p}");
    }
}

#[test]
fn one_consumer_gets_everything_in_order() {
    let b = broker(2, TableNature::Operational);
    for i in 0..50 {
        b.publish("t", &format!("k{i}"), i.to_string(), false).unwrap();
    }
    b.join("g", "a", &["t"]).unwrap();
    assert_eq!(settle(&b, &["a"])["a"], [0, 1]);
    let got = drain(&b, "a");
    assert_eq!(got.len(), 50);
    for p in 0..2 {
        let offs: Vec<u64> = got.iter().filter(|m| m.0 == p).map(|m| m.1).collect();
        assert!(offs.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn two_consumers_split_two_partitions() {
    let b = broker(2, TableNature::Operational);
    b.join("g", "a", &["t"]).unwrap();
    b.join("g", "b", &["t"]).unwrap();
    let a = settle(&b, &["a", "b"]);
    assert_eq!(a["a"].len(), 1);
    assert_eq!(a["b"].len(), 1);
    assert_ne!(a["a"], a["b"]);
}

#[test]
fn joining_member_shrinks_assignment_and_is_told_first() {
    let b = broker(20, TableNature::Operational);
    b.join("g", "a", &["t"]).unwrap();
    let rx = b.rebalance_listener("g", "a").unwrap();
    let first = settle(&b, &["a"]);
    assert_eq!(first["a"].len(), 20);
    for i in 0..200 {
        b.publish("t", &format!("E{i}"), i.to_string(), false).unwrap();
    }
    b.join("g", "b", &["t"]).unwrap();
    // a is blocked from messages until everyone has acknowledged.
    assert!(matches!(b.poll("g", "a", 10).unwrap(), Poll::Rebalancing));
    let second = settle(&b, &["a", "b"]);
    let old: std::collections::BTreeSet<u32> = first["a"].iter().copied().collect();
    let new: std::collections::BTreeSet<u32> = second["a"].iter().copied().collect();
    assert!(new.is_subset(&old) && new.len() < old.len());
    // Listener saw the initial and the shrunk assignment, in that order.
    let events: Vec<_> = rx.try_iter().collect();
    assert_eq!(events.len(), 2);
    assert_eq!(events[1].partitions.len(), new.len());
    // b's first messages only come from b's partitions.
    for (p, _, _) in drain(&b, "b") {
        assert!(second["b"].contains(&p));
    }
}

#[test]
fn survivors_cover_all_partitions_after_two_leave() {
    let b = broker(20, TableNature::Operational);
    let names = ["w0", "w1", "w2", "w3", "w4"];
    for n in names {
        b.join("g", n, &["t"]).unwrap();
    }
    let before = settle(&b, &names);
    assert_eq!(before.values().map(Vec::len).sum::<usize>(), 20);
    b.leave("g", "w1").unwrap();
    b.leave("g", "w3").unwrap();
    let after = settle(&b, &["w0", "w2", "w4"]);
    assert_eq!(after.len(), 3);
    let mut all: Vec<u32> = after.values().flatten().copied().collect();
    all.sort();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
}

#[test]
fn static_membership_gets_one_assignment() {
    let b = broker(4, TableNature::Operational);
    b.join("g", "a", &["t"]).unwrap();
    let rx = b.rebalance_listener("g", "a").unwrap();
    settle(&b, &["a"]);
    for _ in 0..5 {
        drain(&b, "a");
    }
    assert_eq!(rx.try_iter().count(), 1);
}

#[test]
fn ownership_is_exclusive_through_rebalances() {
    let b = broker(20, TableNature::Operational);
    let names = ["a", "b", "c", "d"];
    for (i, n) in names.iter().enumerate() {
        b.join("g", n, &["t"]).unwrap();
        settle(&b, &names[..=i]);
    }
    b.leave("g", "b").unwrap();
    settle(&b, &["a", "c", "d"]);
    let mut owner: BTreeMap<TopicPartition, String> = BTreeMap::new();
    for ev in b.ownership_log() {
        for tp in ev.partitions {
            if ev.gained {
                assert!(owner.insert(tp.clone(), ev.member.clone()).is_none(), "{tp:?} owned twice");
            } else {
                assert_eq!(owner.remove(&tp), Some(ev.member.clone()));
            }
        }
    }
    assert_eq!(owner.len(), 20);
}

#[test]
fn snapshot_rules() {
    let b = broker(1, TableNature::Master);
    b.publish("t", "k1", "1".into(), false).unwrap();
    b.publish("t", "k2", "1".into(), false).unwrap();
    b.publish("t", "k1", "2".into(), false).unwrap();
    let s = b.snapshot("t").unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s["k1"].payload, "2");
    b.publish("t", "k1", "3".into(), true).unwrap();
    assert!(!b.snapshot("t").unwrap().contains_key("k1"));

    let op = broker(2, TableNature::Operational);
    assert!(op.snapshot("t").is_err());
    assert!(matches!(op.publish("nope", "k", "1".into(), false), Err(BrokerError::UnknownTopic(_))));
}

#[test]
fn shared_entries_survive_a_member() {
    let b = broker(1, TableNature::Operational);
    b.join("g", "a", &["t"]).unwrap();
    b.join("g", "b", &["t"]).unwrap();
    b.put_shared("buffer/x", "v").unwrap();
    b.leave("g", "a").unwrap();
    assert_eq!(b.get_shared("buffer/x").as_deref(), Some("v"));
    assert_eq!(b.get_shared("missing"), None);
}

#[test]
fn persisted_state_reopens() {
    let d = tempfile::tempdir().unwrap();
    {
        let b = Broker::open(d.path()).unwrap();
        b.create_topic("t", 3, TableNature::Operational).unwrap();
        for i in 0..30 {
            b.publish("t", &format!("k{i}"), format!("{{\"i\":{i}}}"), false).unwrap();
        }
        b.join("g", "a", &["t"]).unwrap();
        settle(&b, &["a"]);
        b.commit("g", "a", &TopicPartition::new("t", 1), 4).unwrap();
        b.put_shared("s", "1").unwrap();
    }
    let b = Broker::open(d.path()).unwrap();
    let total: u64 = (0..3).map(|p| b.end_offset("t", p).unwrap()).sum();
    assert_eq!(total, 30);
    assert_eq!(b.committed("g", &TopicPartition::new("t", 1)), 4);
    assert_eq!(b.get_shared("s").as_deref(), Some("1"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snapshot_equals_transcript_replay(ops in prop::collection::vec((0u8..100, any::<bool>(), any::<u16>()), 0..2_000)) {
        let b = broker(1, TableNature::Master);
        let mut model: BTreeMap<String, String> = BTreeMap::new();
        for (k, del, v) in ops {
            let key = format!("k{k}");
            let payload = v.to_string();
            b.publish("t", &key, payload.clone(), del).unwrap();
            if del {
                model.remove(&key);
            } else {
                model.insert(key, payload);
            }
        }
        let snap: BTreeMap<String, String> = b.snapshot("t").unwrap().into_iter().map(|(k, m)| (k, m.payload.clone())).collect();
        prop_assert_eq!(snap, model);
    }
}

#[test]
fn ten_thousand_upserts_over_a_hundred_keys() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let b = broker(1, TableNature::Master);
    let mut model: BTreeMap<String, String> = BTreeMap::new();
    for i in 0..10_000u32 {
        let key = format!("k{}", rng.gen_range(0..100));
        let del = rng.gen_bool(0.2);
        b.publish("t", &key, i.to_string(), del).unwrap();
        if del {
            model.remove(&key);
        } else {
            model.insert(key, i.to_string());
        }
    }
    let snap: BTreeMap<String, String> = b.snapshot("t").unwrap().into_iter().map(|(k, m)| (k, m.payload.clone())).collect();
    assert_eq!(snap, model);
}
