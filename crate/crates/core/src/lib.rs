//! Core data model and algorithms of a near-real-time ETL pipeline.
//!
//! Everything here is pure and needs only `alloc`: change records and their
//! validation, the fixed key partitioner and range assignor, the filtered
//! master-data cache, the OEE fact-grain splitter and indicator math, the
//! per-key timeline with incremental window invalidation, and the canonical
//! fact dump line. The `nrtetl` crate adds logs, the broker, workers and IO.
#![no_std]

extern crate alloc;

pub mod assign;
pub mod buffer;
pub mod cache;
pub mod fact;
pub mod hash;
pub mod oee;
pub mod record;
pub mod schema;
pub mod table;
pub mod timeline;
pub mod value;

pub use assign::{range_assign, TopicPartition};
pub use buffer::{LateBufferEntry, MessageId};
pub use cache::{Applied, KeyFilter, MasterCacheTable};
pub use fact::{FactKind, FactRow};
pub use hash::{fnv1a64, partition_for};
pub use oee::{FactGrain, GrainKind, ProductionInterval, QualityRecord, Status, StatusInterval, Window};
pub use record::{ChangeRecord, Op};
pub use schema::{KeyData, Missing, Preset};
pub use table::{TableConfig, TableNature};
pub use timeline::{dirty_windows, KeyTimeline, StatusEvent};
pub use value::{Row, Scalar};
