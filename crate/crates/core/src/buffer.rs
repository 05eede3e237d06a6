//! Late operational messages: records waiting for master data.

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::record::ChangeRecord;
use crate::schema::Missing;

/// Where a message sits in the broker; doubles as its idempotence key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId {
    pub topic: String,
    pub partition: u32,
    pub offset: u64,
}

impl MessageId {
    /// Shared-store key of a buffered message.
    pub fn buffer_key(&self) -> String {
        format!("{}{:05}/{:012}", buffer_prefix(&self.topic), self.partition, self.offset)
    }
}

/// Prefix of every buffered message of `topic`.
pub fn buffer_prefix(topic: &str) -> String {
    format!("buffer/{topic}/")
}

/// Prefix of the buffered messages of one partition.
pub fn partition_buffer_prefix(topic: &str, partition: u32) -> String {
    format!("{}{partition:05}/", buffer_prefix(topic))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateBufferEntry {
    pub business_key: String,
    pub id: MessageId,
    pub record: ChangeRecord,
    /// The master lookup that failed.
    pub reason: Missing,
    pub enqueue_ts: i64,
    pub attempt_count: u32,
}

/// Only entries strictly older than the newest cached master transaction are
/// worth retrying; younger ones cannot have their master data yet.
pub fn due_for_retry(entry_tx_ts: i64, cache_high_water: i64) -> bool {
    entry_tx_ts < cache_high_water
}
