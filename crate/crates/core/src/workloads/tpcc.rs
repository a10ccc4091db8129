use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Generator, Op, TxnProgram};
use crate::storage::{Key, PartitionId};

pub const DISTRICTS: u64 = 10;
pub const MAX_LINES: u64 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemMode {
    /// Every node holds the read-only Item table; reads never leave the node.
    Replicated,
    /// Items are spread across warehouses like any other table.
    Partitioned,
}

impl FromStr for ItemMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replicated" => Ok(ItemMode::Replicated),
            "partitioned" => Ok(ItemMode::Partitioned),
            other => Err(format!("unknown item mode {other:?}")),
        }
    }
}

impl fmt::Display for ItemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemMode::Replicated => "replicated",
            ItemMode::Partitioned => "partitioned",
        })
    }
}

/// Simplified NewOrder over a fixed keyspace. Each warehouse is one
/// partition laid out as:
///
/// ```text
/// row 0                          warehouse
/// rows 1..=10                    districts
/// customers                      DISTRICTS * customers_per_district
/// stock                          items
/// items (partitioned mode)       items / warehouses, by item id modulo
/// orders                         DISTRICTS * order_slots ring
/// order lines                    DISTRICTS * order_slots * MAX_LINES ring
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct TpccConfig {
    pub warehouses: u32,
    pub customers_per_district: u64,
    pub items: u64,
    pub order_slots: u64,
    pub item_mode: ItemMode,
    /// Probability that a transaction is supplied by remote warehouses.
    pub remote_ratio: f64,
    /// Zipf skew over item ids.
    pub skew: f64,
}

impl Default for TpccConfig {
    fn default() -> Self {
        TpccConfig {
            warehouses: 4,
            customers_per_district: 30,
            items: 1000,
            order_slots: 16,
            item_mode: ItemMode::Replicated,
            remote_ratio: 0.1,
            skew: 0.0,
        }
    }
}

impl TpccConfig {
    fn customer_base(&self) -> u64 {
        1 + DISTRICTS
    }
    fn stock_base(&self) -> u64 {
        self.customer_base() + DISTRICTS * self.customers_per_district
    }
    fn item_base(&self) -> u64 {
        self.stock_base() + self.items
    }
    fn items_per_warehouse(&self) -> u64 {
        self.items.div_ceil(self.warehouses as u64)
    }
    fn order_base(&self) -> u64 {
        self.item_base() + self.items_per_warehouse()
    }
    fn line_base(&self) -> u64 {
        self.order_base() + DISTRICTS * self.order_slots
    }

    pub fn rows_per_warehouse(&self) -> u64 {
        self.line_base() + DISTRICTS * self.order_slots * MAX_LINES
    }

    pub fn warehouse_key(&self, w: PartitionId) -> Key {
        Key::new(w, 0)
    }
    pub fn district_key(&self, w: PartitionId, d: u64) -> Key {
        Key::new(w, 1 + d)
    }
    pub fn customer_key(&self, w: PartitionId, d: u64, c: u64) -> Key {
        Key::new(w, self.customer_base() + d * self.customers_per_district + c)
    }
    pub fn stock_key(&self, w: PartitionId, item: u64) -> Key {
        Key::new(w, self.stock_base() + item)
    }
    pub fn item_key(&self, item: u64) -> Key {
        let w = (item % self.warehouses as u64) as PartitionId;
        Key::new(w, self.item_base() + item / self.warehouses as u64)
    }
    pub fn order_key(&self, w: PartitionId, d: u64, slot: u64) -> Key {
        Key::new(w, self.order_base() + d * self.order_slots + slot)
    }
    pub fn line_key(&self, w: PartitionId, d: u64, slot: u64, line: u64) -> Key {
        Key::new(w, self.line_base() + (d * self.order_slots + slot) * MAX_LINES + line)
    }
}

pub(super) fn generate(cfg: &TpccConfig, g: &Generator, rng: &mut ChaCha8Rng, home: PartitionId) -> TxnProgram {
    let w = home;
    let d = rng.gen_range(0..DISTRICTS);
    let c = rng.gen_range(0..cfg.customers_per_district);
    let remote = cfg.warehouses > 1 && cfg.remote_ratio > 0.0 && rng.gen_bool(cfg.remote_ratio);
    let lines = rng.gen_range(5..=MAX_LINES);

    let mut item_ids: Vec<u64> = Vec::with_capacity(lines as usize);
    while item_ids.len() < lines as usize {
        let i = g.zipf.sample(rng);
        if !item_ids.contains(&i) || item_ids.len() as u64 >= cfg.items {
            item_ids.push(i);
        }
    }

    let mut ops = vec![
        Op::Read(cfg.warehouse_key(w)),
        Op::Update(cfg.district_key(w, d)),
        Op::Read(cfg.customer_key(w, d, c)),
    ];
    for &item in &item_ids {
        ops.push(match cfg.item_mode {
            ItemMode::Replicated => Op::StaticRead(cfg.item_key(item)),
            ItemMode::Partitioned => Op::Read(cfg.item_key(item)),
        });
        let supply = if remote { g.random_other(rng, w) } else { w };
        ops.push(Op::Update(cfg.stock_key(supply, item)));
    }
    let slot = rng.gen_range(0..cfg.order_slots);
    ops.push(Op::Write(cfg.order_key(w, d, slot)));
    for line in 0..lines {
        ops.push(Op::Write(cfg.line_key(w, d, slot, line)));
    }
    TxnProgram { label: "new_order", ops }
}
