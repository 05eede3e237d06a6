//! Change-log capture, partitioned messaging, cached stream transformation
//! and loading of OEE facts, with the workload generator and harness used to
//! check and benchmark them.

pub mod broker;
pub mod cdc_log;
pub mod cost;
pub mod metrics;
pub mod processor;
pub mod producer;
pub mod source;
pub mod uploader;
pub mod workload;
pub mod harness;
