use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Generator, Op, TxnProgram};
use crate::storage::{Key, PartitionId};

#[derive(Debug, Clone, PartialEq)]
pub struct YcsbConfig {
    pub ops_per_txn: usize,
    /// Probability that an op is a read; the rest are read-modify-writes.
    pub read_ratio: f64,
    pub skew: f64,
    pub cross_ratio: f64,
    pub rows_per_partition: u64,
    /// Key updates by the Zipf distribution too instead of uniformly.
    pub zipf_updates: bool,
}

impl Default for YcsbConfig {
    fn default() -> Self {
        YcsbConfig {
            ops_per_txn: 4,
            read_ratio: 0.8,
            skew: 0.0,
            cross_ratio: 0.0,
            rows_per_partition: 400_000,
            zipf_updates: false,
        }
    }
}

pub(super) fn generate(cfg: &YcsbConfig, g: &Generator, rng: &mut ChaCha8Rng, home: PartitionId) -> TxnProgram {
    let cross = cfg.cross_ratio > 0.0 && rng.gen_bool(cfg.cross_ratio);
    let mut ops: Vec<Op> = (0..cfg.ops_per_txn)
        .map(|_| {
            let p = g.pick_partition(rng, home, cross);
            if rng.gen_bool(cfg.read_ratio) {
                Op::Read(Key::new(p, g.zipf.sample(rng)))
            } else {
                let dist = if cfg.zipf_updates { &g.zipf } else { &g.uniform };
                Op::Update(Key::new(p, dist.sample(rng)))
            }
        })
        .collect();
    if cross {
        g.force_remote(rng, home, &mut ops);
    }
    TxnProgram { label: "ycsb", ops }
}
