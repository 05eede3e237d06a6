//! Range assignment of topic partitions to group members.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

/// A `(topic, partition)` coordinate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicPartition {
    pub topic: String,
    pub partition: u32,
}

impl TopicPartition {
    pub fn new(topic: impl Into<String>, partition: u32) -> Self {
        TopicPartition {
            topic: topic.into(),
            partition,
        }
    }
}

/// Splits the sorted partitions of each topic into contiguous chunks, one per
/// sorted member id. Earlier members take the remainder, one extra partition
/// each. Members beyond the partition count receive nothing.
///
/// `topics` is `(name, partition_count)`. Every member appears in the result,
/// possibly with an empty list.
pub fn range_assign(
    members: &[String],
    topics: &[(String, u32)],
) -> BTreeMap<String, Vec<TopicPartition>> {
    let mut sorted: Vec<&String> = members.iter().collect();
    sorted.sort();
    sorted.dedup();
    let mut out: BTreeMap<String, Vec<TopicPartition>> =
        sorted.iter().map(|m| ((*m).clone(), Vec::new())).collect();
    if sorted.is_empty() {
        return out;
    }
    let mut topics: Vec<&(String, u32)> = topics.iter().collect();
    topics.sort();
    let n = sorted.len() as u32;
    for (topic, count) in topics {
        let per = count / n;
        let extra = count % n;
        let mut next = 0u32;
        for (i, member) in sorted.iter().enumerate() {
            let take = per + u32::from((i as u32) < extra);
            let list = out.get_mut(*member).expect("member present");
            for p in next..next + take {
                list.push(TopicPartition::new(topic.clone(), p));
            }
            next += take;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i:02}")).collect()
    }

    #[test]
    fn covers_every_partition_exactly_once() {
        let topics = vec![("production".into(), 20u32)];
        for n in 1..=24 {
            let a = range_assign(&ids(n), &topics);
            let mut all: Vec<u32> = a.values().flatten().map(|tp| tp.partition).collect();
            all.sort();
            assert_eq!(all, (0..20).collect::<Vec<_>>(), "members={n}");
        }
    }

    #[test]
    fn growing_shrinks_existing_member() {
        let topics = vec![("t".into(), 20u32)];
        let one = range_assign(&ids(1), &topics);
        let two = range_assign(&ids(2), &topics);
        let before = &one["w00"];
        let after = &two["w00"];
        assert!(after.len() < before.len());
        assert!(after.iter().all(|tp| before.contains(tp)));
    }

    #[test]
    fn surplus_members_get_nothing() {
        let a = range_assign(&ids(24), &[("t".into(), 20)]);
        let empty = a.values().filter(|v| v.is_empty()).count();
        assert_eq!(empty, 4);
        assert!(a.values().all(|v| v.len() <= 1));
    }
}
