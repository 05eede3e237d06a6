//! In-process partitioned message queue.
//!
//! Topics hold keyed messages in partitions chosen by the fixed FNV-1a
//! partitioner. Master topics keep a compacted index so a snapshot is a map
//! read. Consumer groups use eager range rebalancing with a barrier: after a
//! membership change every member must poll once (giving up what it owned)
//! before anyone receives the new assignment, so no partition ever has two
//! owners. A small shared key-value store lives next to the topics.
//!
//! With a directory the broker appends every change to line-framed files and
//! reloads them on open.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};

use nrtetl_core::assign::{range_assign, TopicPartition};
use nrtetl_core::hash::partition_for;
use nrtetl_core::table::TableNature;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub partition: u32,
    pub offset: u64,
    pub key: String,
    pub payload: String,
    pub tombstone: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub consumer_group: String,
    pub consumer_id: String,
    pub generation: u64,
    pub partitions: BTreeSet<TopicPartition>,
}

#[derive(Debug)]
pub enum Poll {
    /// A membership change is in progress; this member owns nothing until
    /// every member has polled.
    Rebalancing,
    /// New ownership, always delivered before any message of it.
    Assigned(Assignment),
    Messages(Vec<Arc<Message>>),
}

/// One change of partition ownership, for exclusivity audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnershipEvent {
    pub seq: u64,
    pub group: String,
    pub member: String,
    pub generation: u64,
    pub gained: bool,
    pub partitions: BTreeSet<TopicPartition>,
}

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("topic `{0}` already exists with a different layout")]
    TopicMismatch(String),
    #[error("topic `{0}` is not a master topic")]
    NotMaster(String),
    #[error("partition {partition} out of range for `{topic}`")]
    UnknownPartition { topic: String, partition: u32 },
    #[error("`{member}` is not a member of group `{group}`")]
    UnknownMember { group: String, member: String },
    #[error("`{member}` does not own {topic}/{partition}")]
    NotOwner {
        member: String,
        topic: String,
        partition: u32,
    },
    #[error("broker unavailable")]
    Unavailable,
    #[error("payload is not a JSON value: {0}")]
    Payload(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BrokerError + '_ {
    move |source| BrokerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

type Result<T> = std::result::Result<T, BrokerError>;

/// Appends JSON lines, flushing each one.
struct Journal {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Journal {
    fn open(path: PathBuf) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Journal {
            path,
            out: BufWriter::new(f),
        })
    }

    fn append(&mut self, line: &str) -> Result<()> {
        let res = self
            .out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .and_then(|_| self.out.flush());
        res.map_err(io_err(&self.path))
    }
}

/// Reads the complete lines of a journal. A torn or undecodable final line
/// is what an interrupted append leaves behind; it is cut off. Damage
/// anywhere else is an error.
fn replay<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut good = 0u64;
    let mut line = String::new();
    let mut pending_err: Option<(usize, String)> = None;
    let mut n_line = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        n_line += 1;
        if let Some((at, message)) = pending_err.take() {
            return Err(BrokerError::Corrupt {
                path: path.to_path_buf(),
                line: at,
                message,
            });
        }
        if !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str(line.trim_end()) {
            Ok(v) => {
                out.push(v);
                good += n as u64;
            }
            Err(e) => pending_err = Some((n_line, e.to_string())),
        }
    }
    let len = fs::metadata(path).map_err(io_err(path))?.len();
    if len != good {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        f.set_len(good).map_err(io_err(path))?;
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TopicMeta {
    name: String,
    partition_count: u32,
    nature: TableNature,
}

#[derive(Serialize)]
struct MessageLineOut<'a> {
    offset: u64,
    key: &'a str,
    tombstone: bool,
    record: &'a RawValue,
}

#[derive(Deserialize)]
struct MessageLineIn {
    offset: u64,
    key: String,
    tombstone: bool,
    record: Box<RawValue>,
}

#[derive(Serialize, Deserialize)]
struct CommitLine {
    group: String,
    topic: String,
    partition: u32,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct SharedLine {
    key: String,
    value: Option<String>,
}

struct Partition {
    log: Vec<Arc<Message>>,
    /// Latest live message per key, master topics only.
    compacted: Option<BTreeMap<String, Arc<Message>>>,
    journal: Option<Journal>,
}

impl Partition {
    fn push(&mut self, msg: Arc<Message>) {
        if let Some(c) = &mut self.compacted {
            if msg.tombstone {
                c.remove(&msg.key);
            } else {
                c.insert(msg.key.clone(), msg.clone());
            }
        }
        self.log.push(msg);
    }
}

struct Topic {
    nature: TableNature,
    partitions: Vec<Mutex<Partition>>,
}

#[derive(Default)]
struct Member {
    acked: u64,
    delivered: u64,
    owned: BTreeSet<TopicPartition>,
    positions: BTreeMap<TopicPartition, u64>,
    listeners: Vec<Sender<Assignment>>,
    cursor: usize,
}

#[derive(Default)]
struct Group {
    topics: BTreeSet<String>,
    generation: u64,
    members: BTreeMap<String, Member>,
    assignment: Option<BTreeMap<String, Vec<TopicPartition>>>,
    committed: BTreeMap<TopicPartition, u64>,
}

#[derive(Default)]
struct Shared {
    map: BTreeMap<String, String>,
    journal: Option<Journal>,
}

#[derive(Default)]
struct Groups {
    map: BTreeMap<String, Group>,
    ownership: Vec<OwnershipEvent>,
    commits: Option<Journal>,
}

pub struct Broker {
    dir: Option<PathBuf>,
    topics: RwLock<BTreeMap<String, Arc<Topic>>>,
    groups: Mutex<Groups>,
    shared: Mutex<Shared>,
    published: AtomicU64,
    unavailable: AtomicBool,
}

fn topic_file(dir: &Path, name: &str, partition: u32) -> PathBuf {
    dir.join(format!("topic-{name}-{partition:05}.log"))
}

impl Broker {
    pub fn in_memory() -> Self {
        Broker {
            dir: None,
            topics: RwLock::new(BTreeMap::new()),
            groups: Mutex::new(Groups::default()),
            shared: Mutex::new(Shared::default()),
            published: AtomicU64::new(0),
            unavailable: AtomicBool::new(false),
        }
    }

    /// Opens (or creates) a persistent broker in `dir`, reloading topics,
    /// committed offsets and the shared store.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let metas: Vec<TopicMeta> = match fs::read_to_string(dir.join("topics.json")) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| BrokerError::Corrupt {
                path: dir.join("topics.json"),
                line: 1,
                message: e.to_string(),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&dir.join("topics.json"))(e)),
        };
        let mut topics = BTreeMap::new();
        for meta in metas {
            let mut parts = Vec::new();
            for p in 0..meta.partition_count {
                let path = topic_file(&dir, &meta.name, p);
                let mut part = Partition {
                    log: Vec::new(),
                    compacted: (meta.nature == TableNature::Master).then(BTreeMap::new),
                    journal: None,
                };
                for (i, line) in replay::<MessageLineIn>(&path)?.into_iter().enumerate() {
                    if line.offset != i as u64 {
                        return Err(BrokerError::Corrupt {
                            path,
                            line: i + 1,
                            message: format!("offset {} out of sequence", line.offset),
                        });
                    }
                    part.push(Arc::new(Message {
                        topic: meta.name.clone(),
                        partition: p,
                        offset: line.offset,
                        key: line.key,
                        payload: line.record.get().to_string(),
                        tombstone: line.tombstone,
                    }));
                }
                part.journal = Some(Journal::open(path)?);
                parts.push(Mutex::new(part));
            }
            topics.insert(
                meta.name,
                Arc::new(Topic {
                    nature: meta.nature,
                    partitions: parts,
                }),
            );
        }
        let mut groups = Groups::default();
        let commits_path = dir.join("offsets.log");
        for c in replay::<CommitLine>(&commits_path)? {
            let g = groups.map.entry(c.group).or_default();
            g.committed
                .insert(TopicPartition::new(c.topic, c.partition), c.offset);
        }
        groups.commits = Some(Journal::open(commits_path)?);
        let mut shared = Shared::default();
        let shared_path = dir.join("shared.log");
        for s in replay::<SharedLine>(&shared_path)? {
            match s.value {
                Some(v) => shared.map.insert(s.key, v),
                None => shared.map.remove(&s.key),
            };
        }
        shared.journal = Some(Journal::open(shared_path)?);
        Ok(Broker {
            dir: Some(dir),
            topics: RwLock::new(topics),
            groups: Mutex::new(groups),
            shared: Mutex::new(shared),
            published: AtomicU64::new(0),
            unavailable: AtomicBool::new(false),
        })
    }

    /// Creates a topic; repeating an identical creation is a no-op.
    pub fn create_topic(&self, name: &str, partition_count: u32, nature: TableNature) -> Result<()> {
        let mut topics = self.topics.write().unwrap();
        if let Some(t) = topics.get(name) {
            if t.nature == nature && t.partitions.len() == partition_count as usize {
                return Ok(());
            }
            return Err(BrokerError::TopicMismatch(name.into()));
        }
        if partition_count == 0 {
            return Err(BrokerError::TopicMismatch(name.into()));
        }
        let mut parts = Vec::new();
        for p in 0..partition_count {
            let journal = match &self.dir {
                Some(d) => Some(Journal::open(topic_file(d, name, p))?),
                None => None,
            };
            parts.push(Mutex::new(Partition {
                log: Vec::new(),
                compacted: (nature == TableNature::Master).then(BTreeMap::new),
                journal,
            }));
        }
        topics.insert(
            name.into(),
            Arc::new(Topic {
                nature,
                partitions: parts,
            }),
        );
        if let Some(d) = &self.dir {
            let metas: Vec<TopicMeta> = topics
                .iter()
                .map(|(n, t)| TopicMeta {
                    name: n.clone(),
                    partition_count: t.partitions.len() as u32,
                    nature: t.nature,
                })
                .collect();
            let path = d.join("topics.json");
            let tmp = d.join("topics.json.tmp");
            fs::write(&tmp, serde_json::to_string_pretty(&metas).unwrap()).map_err(io_err(&tmp))?;
            fs::rename(&tmp, &path).map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>> {
        self.topics
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownTopic(name.into()))
    }

    pub fn topic_names(&self) -> Vec<String> {
        self.topics.read().unwrap().keys().cloned().collect()
    }

    pub fn partition_count(&self, topic: &str) -> Result<u32> {
        Ok(self.topic(topic)?.partitions.len() as u32)
    }

    pub fn nature(&self, topic: &str) -> Result<TableNature> {
        Ok(self.topic(topic)?.nature)
    }

    /// Total messages published through this handle since it was opened.
    /// Fault switch: while set, every publish fails with
    /// [`BrokerError::Unavailable`].
    pub fn set_unavailable(&self, down: bool) {
        self.unavailable.store(down, Ordering::SeqCst);
    }

    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    /// Appends a message to partition `hash(key) mod partition_count`.
    pub fn publish(
        &self,
        topic: &str,
        key: &str,
        payload: String,
        tombstone: bool,
    ) -> Result<(u32, u64)> {
        if self.unavailable.load(Ordering::SeqCst) {
            return Err(BrokerError::Unavailable);
        }
        let t = self.topic(topic)?;
        let partition = partition_for(key, t.partitions.len() as u32);
        let mut part = t.partitions[partition as usize].lock().unwrap();
        let offset = part.log.len() as u64;
        if let Some(j) = &mut part.journal {
            let raw = RawValue::from_string(payload.clone())
                .map_err(|e| BrokerError::Payload(e.to_string()))?;
            let line = serde_json::to_string(&MessageLineOut {
                offset,
                key,
                tombstone,
                record: &raw,
            })
            .unwrap();
            j.append(&line)?;
        }
        part.push(Arc::new(Message {
            topic: topic.into(),
            partition,
            offset,
            key: key.into(),
            payload,
            tombstone,
        }));
        self.published.fetch_add(1, Ordering::Relaxed);
        Ok((partition, offset))
    }

    pub fn end_offset(&self, topic: &str, partition: u32) -> Result<u64> {
        let t = self.topic(topic)?;
        let part = t
            .partitions
            .get(partition as usize)
            .ok_or_else(|| BrokerError::UnknownPartition {
                topic: topic.into(),
                partition,
            })?;
        let len = part.lock().unwrap().log.len() as u64;
        Ok(len)
    }

    /// Reads up to `max` messages of one partition starting at `from`,
    /// outside any group.
    pub fn fetch(&self, topic: &str, partition: u32, from: u64, max: usize) -> Result<Vec<Arc<Message>>> {
        let t = self.topic(topic)?;
        let part = t
            .partitions
            .get(partition as usize)
            .ok_or_else(|| BrokerError::UnknownPartition {
                topic: topic.into(),
                partition,
            })?;
        let part = part.lock().unwrap();
        let from = (from as usize).min(part.log.len());
        let to = from.saturating_add(max).min(part.log.len());
        Ok(part.log[from..to].to_vec())
    }

    /// Latest payload per key of a master topic; deleted keys are absent.
    pub fn snapshot(&self, topic: &str) -> Result<BTreeMap<String, Arc<Message>>> {
        Ok(self.snapshot_with_offsets(topic)?.0)
    }

    /// The snapshot together with the end offset of every partition at the
    /// instant it was taken, so a reader can continue exactly after it.
    pub fn snapshot_with_offsets(
        &self,
        topic: &str,
    ) -> Result<(BTreeMap<String, Arc<Message>>, Vec<u64>)> {
        let t = self.topic(topic)?;
        if t.nature != TableNature::Master {
            return Err(BrokerError::NotMaster(topic.into()));
        }
        let mut out = BTreeMap::new();
        let mut ends = Vec::with_capacity(t.partitions.len());
        for p in &t.partitions {
            let p = p.lock().unwrap();
            let c = p.compacted.as_ref().expect("master partitions are compacted");
            out.extend(c.iter().map(|(k, m)| (k.clone(), m.clone())));
            ends.push(p.log.len() as u64);
        }
        Ok((out, ends))
    }

    /// Registers `member` in `group`, subscribed to `topics`, and starts a
    /// rebalance. Joining twice is a no-op.
    pub fn join(&self, group: &str, member: &str, topics: &[&str]) -> Result<()> {
        for t in topics {
            self.topic(t)?;
        }
        let mut gs = self.groups.lock().unwrap();
        let g = gs.map.entry(group.into()).or_default();
        g.topics.extend(topics.iter().map(|t| t.to_string()));
        if g.members.contains_key(member) {
            return Ok(());
        }
        g.members.insert(member.into(), Member::default());
        Self::bump(g);
        Ok(())
    }

    /// Removes `member`; its partitions move at the next rebalance.
    pub fn leave(&self, group: &str, member: &str) -> Result<()> {
        let mut guard = self.groups.lock().unwrap();
        let gs = &mut *guard;
        let g = gs.map.get_mut(group).ok_or_else(|| BrokerError::UnknownMember {
            group: group.into(),
            member: member.into(),
        })?;
        let m = g.members.remove(member).ok_or_else(|| BrokerError::UnknownMember {
            group: group.into(),
            member: member.into(),
        })?;
        if !m.owned.is_empty() {
            let seq = gs.ownership.len() as u64;
            gs.ownership.push(OwnershipEvent {
                seq,
                group: group.into(),
                member: member.into(),
                generation: g.generation,
                gained: false,
                partitions: m.owned,
            });
        }
        Self::bump(g);
        Ok(())
    }

    fn bump(g: &mut Group) {
        g.generation += 1;
        g.assignment = None;
    }

    pub fn members(&self, group: &str) -> Vec<String> {
        let gs = self.groups.lock().unwrap();
        gs.map
            .get(group)
            .map(|g| g.members.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn generation(&self, group: &str) -> u64 {
        let gs = self.groups.lock().unwrap();
        gs.map.get(group).map_or(0, |g| g.generation)
    }

    /// Assignment events for `member`, sent before the messages they cover.
    pub fn rebalance_listener(&self, group: &str, member: &str) -> Result<Receiver<Assignment>> {
        let mut gs = self.groups.lock().unwrap();
        let m = gs
            .map
            .get_mut(group)
            .and_then(|g| g.members.get_mut(member))
            .ok_or_else(|| BrokerError::UnknownMember {
                group: group.into(),
                member: member.into(),
            })?;
        let (tx, rx) = mpsc::channel();
        m.listeners.push(tx);
        Ok(rx)
    }

    /// The consumer poll. Polling also acknowledges any pending rebalance.
    pub fn poll(&self, group: &str, member: &str, max: usize) -> Result<Poll> {
        let mut guard = self.groups.lock().unwrap();
        let gs = &mut *guard;
        let unknown = || BrokerError::UnknownMember {
            group: group.into(),
            member: member.into(),
        };
        let g = gs.map.get_mut(group).ok_or_else(unknown)?;
        let generation = g.generation;
        {
            let m = g.members.get_mut(member).ok_or_else(unknown)?;
            m.acked = generation;
            if m.delivered != generation && !m.owned.is_empty() {
                let seq = gs.ownership.len() as u64;
                gs.ownership.push(OwnershipEvent {
                    seq,
                    group: group.into(),
                    member: member.into(),
                    generation,
                    gained: false,
                    partitions: std::mem::take(&mut m.owned),
                });
                m.positions.clear();
            }
        }
        if g.assignment.is_none() {
            if g.members.values().any(|m| m.acked != generation) {
                return Ok(Poll::Rebalancing);
            }
            let ids: Vec<String> = g.members.keys().cloned().collect();
            let mut topics = Vec::new();
            for t in &g.topics {
                topics.push((t.clone(), self.partition_count(t)?));
            }
            g.assignment = Some(range_assign(&ids, &topics));
        }
        let assigned: BTreeSet<TopicPartition> = g
            .assignment
            .as_ref()
            .and_then(|a| a.get(member))
            .map(|v| v.iter().cloned().collect())
            .unwrap_or_default();
        let committed = &g.committed;
        let m = g.members.get_mut(member).ok_or_else(unknown)?;
        if m.delivered != generation {
            m.delivered = generation;
            m.owned = assigned.clone();
            m.positions = assigned
                .iter()
                .map(|tp| (tp.clone(), committed.get(tp).copied().unwrap_or(0)))
                .collect();
            let a = Assignment {
                consumer_group: group.into(),
                consumer_id: member.into(),
                generation,
                partitions: assigned,
            };
            m.listeners.retain(|l| l.send(a.clone()).is_ok());
            let seq = gs.ownership.len() as u64;
            gs.ownership.push(OwnershipEvent {
                seq,
                group: group.into(),
                member: member.into(),
                generation,
                gained: true,
                partitions: a.partitions.clone(),
            });
            return Ok(Poll::Assigned(a));
        }
        let owned: Vec<TopicPartition> = m.owned.iter().cloned().collect();
        let mut out = Vec::new();
        if owned.is_empty() {
            return Ok(Poll::Messages(out));
        }
        m.cursor = (m.cursor + 1) % owned.len();
        for i in 0..owned.len() {
            if out.len() >= max {
                break;
            }
            let tp = &owned[(m.cursor + i) % owned.len()];
            let pos = m.positions.get(tp).copied().unwrap_or(0);
            let got = self.fetch(&tp.topic, tp.partition, pos, max - out.len())?;
            m.positions.insert(tp.clone(), pos + got.len() as u64);
            out.extend(got);
        }
        Ok(Poll::Messages(out))
    }

    /// Records that `member` has processed `tp` up to (excluding)
    /// `next_offset`. Only the current owner may commit.
    pub fn commit(&self, group: &str, member: &str, tp: &TopicPartition, next_offset: u64) -> Result<()> {
        let mut guard = self.groups.lock().unwrap();
        let gs = &mut *guard;
        let g = gs.map.get_mut(group).ok_or_else(|| BrokerError::UnknownMember {
            group: group.into(),
            member: member.into(),
        })?;
        let owns = g.members.get(member).is_some_and(|m| m.owned.contains(tp));
        if !owns {
            return Err(BrokerError::NotOwner {
                member: member.into(),
                topic: tp.topic.clone(),
                partition: tp.partition,
            });
        }
        let slot = g.committed.entry(tp.clone()).or_insert(0);
        if next_offset <= *slot {
            return Ok(());
        }
        *slot = next_offset;
        if let Some(j) = &mut gs.commits {
            let line = serde_json::to_string(&CommitLine {
                group: group.into(),
                topic: tp.topic.clone(),
                partition: tp.partition,
                offset: next_offset,
            })
            .unwrap();
            j.append(&line)?;
        }
        Ok(())
    }

    pub fn committed(&self, group: &str, tp: &TopicPartition) -> u64 {
        let gs = self.groups.lock().unwrap();
        gs.map
            .get(group)
            .and_then(|g| g.committed.get(tp))
            .copied()
            .unwrap_or(0)
    }

    pub fn ownership_log(&self) -> Vec<OwnershipEvent> {
        self.groups.lock().unwrap().ownership.clone()
    }

    pub fn put_shared(&self, key: &str, value: &str) -> Result<()> {
        let mut s = self.shared.lock().unwrap();
        if let Some(j) = &mut s.journal {
            let line = serde_json::to_string(&SharedLine {
                key: key.into(),
                value: Some(value.into()),
            })
            .unwrap();
            j.append(&line)?;
        }
        s.map.insert(key.into(), value.into());
        Ok(())
    }

    pub fn get_shared(&self, key: &str) -> Option<String> {
        self.shared.lock().unwrap().map.get(key).cloned()
    }

    pub fn delete_shared(&self, key: &str) -> Result<()> {
        let mut s = self.shared.lock().unwrap();
        if !s.map.contains_key(key) {
            return Ok(());
        }
        if let Some(j) = &mut s.journal {
            let line = serde_json::to_string(&SharedLine {
                key: key.into(),
                value: None,
            })
            .unwrap();
            j.append(&line)?;
        }
        s.map.remove(key);
        Ok(())
    }

    /// Entries whose key starts with `prefix`, in key order.
    pub fn scan_shared(&self, prefix: &str) -> Vec<(String, String)> {
        let s = self.shared.lock().unwrap();
        s.map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn count_shared(&self, prefix: &str) -> usize {
        let s = self.shared.lock().unwrap();
        s.map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(v: u64) -> String {
        format!("{{\"v\":{v}}}")
    }

    #[test]
    fn single_partition_offsets() {
        let b = Broker::in_memory();
        b.create_topic("t", 1, TableNature::Master).unwrap();
        assert_eq!(b.publish("t", "a", payload(1), false).unwrap(), (0, 0));
        assert_eq!(b.publish("t", "b", payload(2), false).unwrap(), (0, 1));
    }

    #[test]
    fn one_key_one_partition() {
        let b = Broker::in_memory();
        b.create_topic("t", 4, TableNature::Operational).unwrap();
        let mut parts = BTreeSet::new();
        for i in 0..1000u64 {
            let (p, o) = b.publish("t", "E7", payload(i), false).unwrap();
            assert_eq!(o, i);
            parts.insert(p);
        }
        assert_eq!(parts.len(), 1);
    }

    #[test]
    fn create_topic_checks_layout() {
        let b = Broker::in_memory();
        b.create_topic("t", 2, TableNature::Master).unwrap();
        b.create_topic("t", 2, TableNature::Master).unwrap();
        assert!(matches!(
            b.create_topic("t", 3, TableNature::Master),
            Err(BrokerError::TopicMismatch(_))
        ));
        assert!(matches!(
            b.publish("nope", "k", payload(0), false),
            Err(BrokerError::UnknownTopic(_))
        ));
    }

    #[test]
    fn snapshot_last_writer_and_tombstone() {
        let b = Broker::in_memory();
        b.create_topic("m", 1, TableNature::Master).unwrap();
        b.create_topic("o", 1, TableNature::Operational).unwrap();
        b.publish("m", "k1", payload(1), false).unwrap();
        b.publish("m", "k2", payload(1), false).unwrap();
        b.publish("m", "k1", payload(2), false).unwrap();
        let s = b.snapshot("m").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s["k1"].payload, payload(2));
        assert_eq!(s["k2"].payload, payload(1));
        b.publish("m", "k1", payload(3), true).unwrap();
        b.publish("m", "k2", payload(3), true).unwrap();
        assert!(b.snapshot("m").unwrap().is_empty());
        assert!(matches!(b.snapshot("o"), Err(BrokerError::NotMaster(_))));
    }

    #[test]
    fn shared_store_register() {
        let b = Broker::in_memory();
        assert_eq!(b.get_shared("k"), None);
        b.put_shared("k", "v1").unwrap();
        b.put_shared("k", "v2").unwrap();
        assert_eq!(b.get_shared("k").as_deref(), Some("v2"));
        b.put_shared("k2", "x").unwrap();
        b.put_shared("l", "y").unwrap();
        assert_eq!(b.count_shared("k"), 2);
        b.delete_shared("k").unwrap();
        assert_eq!(b.scan_shared("k"), vec![("k2".to_string(), "x".to_string())]);
    }
}
