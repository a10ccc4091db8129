//! Transaction generators and run metrics.
//!
//! A generator turns a per-worker random stream into [`TxnProgram`]s: fixed
//! sequences of point reads and writes over the pre-loaded keyspace. An
//! aborted program is retried unchanged.

pub mod metrics;
pub mod retwis;
pub mod tpcc;
pub mod ycsb;
pub mod zipf;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::storage::{Key, PartitionId};

pub use metrics::Metrics;
pub use retwis::RetwisConfig;
pub use tpcc::{ItemMode, TpccConfig};
pub use ycsb::YcsbConfig;
pub use zipf::Zipf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Read(Key),
    /// Read-modify-write.
    Update(Key),
    /// Blind write.
    Write(Key),
    /// Non-transactional read of a replicated, read-only table.
    StaticRead(Key),
}

impl Op {
    pub fn key(self) -> Key {
        match self {
            Op::Read(k) | Op::Update(k) | Op::Write(k) | Op::StaticRead(k) => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnProgram {
    pub label: &'static str,
    pub ops: Vec<Op>,
}

impl TxnProgram {
    pub fn is_read_only(&self) -> bool {
        self.ops.iter().all(|op| matches!(op, Op::Read(_) | Op::StaticRead(_)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadConfig {
    Ycsb(YcsbConfig),
    Retwis(RetwisConfig),
    Tpcc(TpccConfig),
}

impl WorkloadConfig {
    pub fn name(&self) -> &'static str {
        match self {
            WorkloadConfig::Ycsb(_) => "ycsb",
            WorkloadConfig::Retwis(_) => "retwis",
            WorkloadConfig::Tpcc(_) => "tpcc",
        }
    }

    pub fn rows_per_partition(&self) -> u64 {
        match self {
            WorkloadConfig::Ycsb(c) => c.rows_per_partition,
            WorkloadConfig::Retwis(c) => c.rows_per_partition,
            WorkloadConfig::Tpcc(c) => c.rows_per_warehouse(),
        }
    }

    /// Partition count implied by the workload, if it fixes one.
    pub fn partitions(&self) -> Option<u32> {
        match self {
            WorkloadConfig::Tpcc(c) => Some(c.warehouses),
            _ => None,
        }
    }

    pub fn set_skew(&mut self, skew: f64) {
        match self {
            WorkloadConfig::Ycsb(c) => c.skew = skew,
            WorkloadConfig::Retwis(c) => c.skew = skew,
            WorkloadConfig::Tpcc(c) => c.skew = skew,
        }
    }

    pub fn set_cross_ratio(&mut self, cross: f64) {
        match self {
            WorkloadConfig::Ycsb(c) => c.cross_ratio = cross,
            WorkloadConfig::Retwis(c) => c.cross_ratio = cross,
            WorkloadConfig::Tpcc(c) => c.remote_ratio = cross,
        }
    }

    pub fn set_rows(&mut self, rows: u64) {
        match self {
            WorkloadConfig::Ycsb(c) => c.rows_per_partition = rows,
            WorkloadConfig::Retwis(c) => c.rows_per_partition = rows,
            WorkloadConfig::Tpcc(_) => {}
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { key: name, value: v.to_string() })
            }
        };
        let skew = |v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange { key: "skew", value: v.to_string() })
            }
        };
        match self {
            WorkloadConfig::Ycsb(c) => {
                unit("read_ratio", c.read_ratio)?;
                unit("cross_ratio", c.cross_ratio)?;
                skew(c.skew)?;
                if c.ops_per_txn == 0 || c.rows_per_partition == 0 {
                    return Err(ConfigError::OutOfRange { key: "ops", value: "0".into() });
                }
            }
            WorkloadConfig::Retwis(c) => {
                unit("mix", c.get_timeline_ratio)?;
                unit("cross_ratio", c.cross_ratio)?;
                skew(c.skew)?;
                if c.rows_per_partition == 0 || c.max_timeline_reads == 0 {
                    return Err(ConfigError::OutOfRange { key: "rows", value: "0".into() });
                }
            }
            WorkloadConfig::Tpcc(c) => {
                unit("cross_ratio", c.remote_ratio)?;
                skew(c.skew)?;
                if c.warehouses == 0 {
                    return Err(ConfigError::OutOfRange { key: "warehouses", value: "0".into() });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown workload {0:?}")]
    UnknownWorkload(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("{key} out of range: {value}")]
    OutOfRange { key: &'static str, value: String },
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

impl FromStr for WorkloadConfig {
    type Err = ConfigError;

    /// Parses whitespace- or newline-separated `key=value` pairs:
    /// `workload`, `skew`, `cross_ratio`, `ops`, `mix`, `rows`,
    /// `zipf_updates`, `warehouses`, `item_mode`. `#` starts a comment.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or(ConfigError::Syntax { line: idx + 1 })?;
                pairs.push((k.to_string(), v.to_string()));
            }
        }
        let workload = pairs.iter().find(|(k, _)| k == "workload").map(|(_, v)| v.as_str()).unwrap_or("ycsb");
        let mut cfg = match workload {
            "ycsb" => WorkloadConfig::Ycsb(YcsbConfig::default()),
            "retwis" => WorkloadConfig::Retwis(RetwisConfig::default()),
            "tpcc" => WorkloadConfig::Tpcc(TpccConfig::default()),
            other => return Err(ConfigError::UnknownWorkload(other.into())),
        };
        for (k, v) in &pairs {
            match (k.as_str(), &mut cfg) {
                ("workload", _) => {}
                ("skew", c) => c.set_skew(parse_value(k, v)?),
                ("cross_ratio", c) => c.set_cross_ratio(parse_value(k, v)?),
                ("rows", c) => c.set_rows(parse_value(k, v)?),
                ("ops", WorkloadConfig::Ycsb(c)) => c.ops_per_txn = parse_value(k, v)?,
                ("mix", WorkloadConfig::Ycsb(c)) => c.read_ratio = parse_value(k, v)?,
                ("mix", WorkloadConfig::Retwis(c)) => c.get_timeline_ratio = parse_value(k, v)?,
                ("zipf_updates", WorkloadConfig::Ycsb(c)) => c.zipf_updates = parse_value(k, v)?,
                ("warehouses", WorkloadConfig::Tpcc(c)) => c.warehouses = parse_value(k, v)?,
                ("item_mode", WorkloadConfig::Tpcc(c)) => c.item_mode = parse_value(k, v)?,
                _ => return Err(ConfigError::UnknownKey(k.clone())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for WorkloadConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkloadConfig::Ycsb(c) => write!(
                f,
                "workload=ycsb ops={} mix={} skew={} cross_ratio={} rows={} zipf_updates={}",
                c.ops_per_txn, c.read_ratio, c.skew, c.cross_ratio, c.rows_per_partition, c.zipf_updates
            ),
            WorkloadConfig::Retwis(c) => write!(
                f,
                "workload=retwis mix={} skew={} cross_ratio={} rows={}",
                c.get_timeline_ratio, c.skew, c.cross_ratio, c.rows_per_partition
            ),
            WorkloadConfig::Tpcc(c) => write!(
                f,
                "workload=tpcc warehouses={} item_mode={} skew={} cross_ratio={}",
                c.warehouses, c.item_mode, c.skew, c.remote_ratio
            ),
        }
    }
}

/// One worker's transaction stream.
pub struct Generator {
    cfg: WorkloadConfig,
    partitions: u32,
    zipf: Zipf,
    uniform: Zipf,
}

impl Generator {
    pub fn new(cfg: &WorkloadConfig, partitions: u32) -> Generator {
        let (items, skew) = match cfg {
            WorkloadConfig::Ycsb(c) => (c.rows_per_partition, c.skew),
            WorkloadConfig::Retwis(c) => (c.rows_per_partition, c.skew),
            WorkloadConfig::Tpcc(c) => (c.items, c.skew),
        };
        Generator { cfg: cfg.clone(), partitions, zipf: Zipf::new(items, skew), uniform: Zipf::new(items, 0.0) }
    }

    pub fn next_txn(&self, rng: &mut ChaCha8Rng, home: PartitionId) -> TxnProgram {
        match &self.cfg {
            WorkloadConfig::Ycsb(c) => ycsb::generate(c, self, rng, home),
            WorkloadConfig::Retwis(c) => retwis::generate(c, self, rng, home),
            WorkloadConfig::Tpcc(c) => tpcc::generate(c, self, rng, home),
        }
    }

    /// Partition for one op: home, or any partition for cross-partition
    /// transactions.
    fn pick_partition(&self, rng: &mut ChaCha8Rng, home: PartitionId, cross: bool) -> PartitionId {
        if cross {
            rng.gen_range(0..self.partitions)
        } else {
            home
        }
    }

    fn random_other(&self, rng: &mut ChaCha8Rng, home: PartitionId) -> PartitionId {
        let p = rng.gen_range(0..self.partitions - 1);
        if p >= home {
            p + 1
        } else {
            p
        }
    }

    /// Ensures a cross-partition transaction leaves its home partition at
    /// least once.
    fn force_remote(&self, rng: &mut ChaCha8Rng, home: PartitionId, ops: &mut [Op]) {
        if self.partitions < 2 || ops.is_empty() || ops.iter().any(|op| op.key().partition != home) {
            return;
        }
        let i = rng.gen_range(0..ops.len());
        let p = self.random_other(rng, home);
        let retarget = |k: Key| Key::new(p, k.row);
        ops[i] = match ops[i] {
            Op::Read(k) => Op::Read(retarget(k)),
            Op::Update(k) => Op::Update(retarget(k)),
            Op::Write(k) => Op::Write(retarget(k)),
            Op::StaticRead(k) => Op::StaticRead(k),
        };
    }
}
