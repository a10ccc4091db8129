//! SCAR: optimistic concurrency control with logical timestamps over a
//! partitioned, replicated in-memory key-value store.
pub mod baselines;
pub mod bench;
pub mod cluster;
pub mod epoch_replication;
pub mod oracle;
pub mod scar_engine;
pub mod storage;
pub mod timestamps;
pub mod transport;
pub mod workloads;
