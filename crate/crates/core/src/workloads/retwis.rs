use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Generator, Op, TxnProgram};
use crate::storage::{Key, PartitionId};

/// Retwis mix: `GetTimeline` reads 1..=`max_timeline_reads` popular keys;
/// `PostTweet` performs read-modify-writes plus blind writes on uniformly
/// chosen keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RetwisConfig {
    pub get_timeline_ratio: f64,
    pub max_timeline_reads: u32,
    pub post_updates: u32,
    pub post_writes: u32,
    pub skew: f64,
    pub cross_ratio: f64,
    pub rows_per_partition: u64,
}

impl Default for RetwisConfig {
    fn default() -> Self {
        RetwisConfig {
            get_timeline_ratio: 0.8,
            max_timeline_reads: 10,
            post_updates: 3,
            post_writes: 2,
            skew: 0.0,
            cross_ratio: 0.0,
            rows_per_partition: 400_000,
        }
    }
}

pub(super) fn generate(cfg: &RetwisConfig, g: &Generator, rng: &mut ChaCha8Rng, home: PartitionId) -> TxnProgram {
    let cross = cfg.cross_ratio > 0.0 && rng.gen_bool(cfg.cross_ratio);
    if rng.gen_bool(cfg.get_timeline_ratio) {
        let n = rng.gen_range(1..=cfg.max_timeline_reads);
        let mut ops: Vec<Op> = (0..n)
            .map(|_| Op::Read(Key::new(g.pick_partition(rng, home, cross), g.zipf.sample(rng))))
            .collect();
        if cross {
            g.force_remote(rng, home, &mut ops);
        }
        return TxnProgram { label: "get_timeline", ops };
    }
    let total = (cfg.post_updates + cfg.post_writes) as usize;
    let mut keys: Vec<Key> = Vec::with_capacity(total);
    let mut attempts = 0;
    while keys.len() < total {
        let k = Key::new(g.pick_partition(rng, home, cross), g.uniform.sample(rng));
        attempts += 1;
        // Tiny keyspaces cannot always supply distinct keys.
        if !keys.contains(&k) || attempts > 64 * total {
            keys.push(k);
        }
    }
    let mut ops: Vec<Op> = keys
        .into_iter()
        .enumerate()
        .map(|(i, k)| if i < cfg.post_updates as usize { Op::Update(k) } else { Op::Write(k) })
        .collect();
    if cross {
        g.force_remote(rng, home, &mut ops);
    }
    TxnProgram { label: "post_tweet", ops }
}
