//! Partitioned in-memory record store hosted by one node.
//!
//! A node hosts a primary or backup copy of some partitions. Each record
//! sits behind its own latch, so metadata is always observed as a
//! consistent snapshot. Writes tagged with an epoch keep a shadow copy of
//! the record as of the last closed epoch, used to roll back after a
//! failure.

use std::collections::BTreeMap;
use std::fmt;

use parking_lot::Mutex;

use crate::timestamps::{LogicalTs, MetaSnapshot, TsMeta, TxnId};

pub type NodeId = u16;
pub type PartitionId = u32;
/// Group-commit epoch number. Epoch 0 is the load epoch and is closed from
/// the start.
pub type Epoch = u64;

/// Default value size: ten attributes of ten bytes each.
pub const DEFAULT_VALUE_SIZE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key {
    pub partition: PartitionId,
    pub row: u64,
}

impl Key {
    pub fn new(partition: PartitionId, row: u64) -> Key {
        Key { partition, row }
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.partition, self.row)
    }
}

/// Deterministic load-time value of a record.
pub fn initial_value(key: Key, size: usize) -> Box<[u8]> {
    let mut x = ((key.partition as u64) << 40) ^ key.row ^ 0x9e37_79b9_7f4a_7c15;
    let mut out = vec![0u8; size];
    for chunk in out.chunks_mut(8) {
        // splitmix64
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes()[..chunk.len()]);
    }
    out.into_boxed_slice()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Backup,
}

#[derive(Debug, Clone)]
struct Shadow {
    value: Box<[u8]>,
    wts: LogicalTs,
    rts: LogicalTs,
    epoch: Epoch,
}

#[derive(Debug, Clone)]
pub struct Record {
    pub value: Box<[u8]>,
    pub meta: TsMeta,
    /// Shared-lock holders (two-phase locking only).
    pub readers: Vec<TxnId>,
    /// Epoch of the last applied write.
    pub write_epoch: Epoch,
    shadow: Option<Box<Shadow>>,
}

impl Record {
    fn loaded(value: Box<[u8]>) -> Record {
        Record {
            value,
            meta: TsMeta::default(),
            readers: Vec::new(),
            write_epoch: 0,
            shadow: None,
        }
    }

    /// Saves the pre-write state the first time the record is written in
    /// `epoch`.
    fn touch(&mut self, epoch: Epoch) {
        if self.write_epoch < epoch {
            self.shadow = Some(Box::new(Shadow {
                value: self.value.clone(),
                wts: self.meta.wts,
                rts: self.meta.rts,
                epoch: self.write_epoch,
            }));
            self.write_epoch = epoch;
        }
    }

    fn install(&mut self, value: &[u8], ts: LogicalTs, epoch: Epoch) {
        self.touch(epoch);
        self.value.copy_from_slice(value);
        self.meta.wts = ts;
        self.meta.rts = ts;
    }

    /// Value and wts as of the last closed epoch.
    fn closed_state(&self, closed: Epoch) -> (&[u8], LogicalTs, LogicalTs) {
        match &self.shadow {
            Some(s) if self.write_epoch > closed => (&s.value, s.wts, s.rts),
            _ => (&self.value, self.meta.wts, self.meta.rts),
        }
    }
}

/// Replica placement: for every partition, the live replicas with the
/// primary first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementMap {
    replicas: Vec<Vec<NodeId>>,
}

/// Result of removing a failed node from the placement.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlacementChange {
    /// (partition, new primary) for partitions that lost their primary.
    pub promoted: Vec<(PartitionId, NodeId)>,
    /// Partitions with no live replica left.
    pub lost: Vec<PartitionId>,
}

impl PlacementMap {
    /// Partition `p` is mastered on node `p % nodes`; its backups go to the
    /// following nodes round-robin, so all replicas are on distinct nodes.
    pub fn round_robin(partitions: u32, nodes: u16, replicas: u16) -> PlacementMap {
        assert!(nodes > 0 && replicas > 0 && replicas <= nodes, "replicas must fit on distinct nodes");
        let replicas = (0..partitions)
            .map(|p| (0..replicas).map(|i| ((p as u64 + i as u64) % nodes as u64) as NodeId).collect())
            .collect();
        PlacementMap { replicas }
    }

    pub fn from_lists(replicas: Vec<Vec<NodeId>>) -> PlacementMap {
        for list in &replicas {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), list.len(), "replicas of a partition must be on distinct nodes");
        }
        PlacementMap { replicas }
    }

    pub fn partitions(&self) -> u32 {
        self.replicas.len() as u32
    }

    pub fn replicas(&self, p: PartitionId) -> &[NodeId] {
        &self.replicas[p as usize]
    }

    pub fn primary(&self, p: PartitionId) -> Option<NodeId> {
        self.replicas[p as usize].first().copied()
    }

    pub fn backups(&self, p: PartitionId) -> &[NodeId] {
        let list = &self.replicas[p as usize];
        if list.is_empty() {
            list
        } else {
            &list[1..]
        }
    }

    pub fn role_of(&self, p: PartitionId, node: NodeId) -> Option<Role> {
        let list = &self.replicas[p as usize];
        match list.iter().position(|&n| n == node) {
            Some(0) => Some(Role::Primary),
            Some(_) => Some(Role::Backup),
            None => None,
        }
    }

    /// Partitions with a replica on `node`.
    pub fn hosted_by(&self, node: NodeId) -> impl Iterator<Item = PartitionId> + '_ {
        self.replicas
            .iter()
            .enumerate()
            .filter(move |(_, list)| list.contains(&node))
            .map(|(p, _)| p as PartitionId)
    }

    /// Drops `node` everywhere; the next live replica in line takes over as
    /// primary.
    pub fn remove_node(&mut self, node: NodeId) -> PlacementChange {
        let mut change = PlacementChange::default();
        for (p, list) in self.replicas.iter_mut().enumerate() {
            if let Some(pos) = list.iter().position(|&n| n == node) {
                list.remove(pos);
                if list.is_empty() {
                    change.lost.push(p as PartitionId);
                } else if pos == 0 {
                    change.promoted.push((p as PartitionId, list[0]));
                }
            }
        }
        change
    }

    pub fn add_backup(&mut self, p: PartitionId, node: NodeId) {
        let list = &mut self.replicas[p as usize];
        if !list.contains(&node) {
            list.push(node);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadConfig {
    pub partitions: u32,
    pub rows_per_partition: u64,
    pub value_size: usize,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig { partitions: 4, rows_per_partition: 400_000, value_size: DEFAULT_VALUE_SIZE }
    }
}

pub struct Partition {
    pub id: PartitionId,
    pub role: Role,
    rows: Vec<Mutex<Record>>,
}

impl Partition {
    fn load(id: PartitionId, role: Role, cfg: &LoadConfig) -> Partition {
        let rows = (0..cfg.rows_per_partition)
            .map(|row| Mutex::new(Record::loaded(initial_value(Key::new(id, row), cfg.value_size))))
            .collect();
        Partition { id, role, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadResult {
    pub value: Box<[u8]>,
    pub wts: LogicalTs,
    pub rts: LogicalTs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockOutcome {
    /// Lock taken; carries the record's current timestamps.
    Acquired { wts: LogicalTs, rts: LogicalTs },
    Busy,
    /// The record changed since it was read.
    Stale { wts: LogicalTs },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtendOutcome {
    Extended { wts: LogicalTs, rts: LogicalTs },
    Stale { wts: LogicalTs },
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionCheck {
    Unchanged,
    Changed,
    Locked,
}

/// One record's state shipped to a recovering replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyRecord {
    pub row: u64,
    pub closed: ReadResult,
    /// Present when the record was modified in the still-open epoch.
    pub live: Option<ReadResult>,
}

/// All partitions hosted on one node.
pub struct NodeStore {
    pub node: NodeId,
    pub value_size: usize,
    partitions: BTreeMap<PartitionId, Partition>,
    closed_epoch: Epoch,
}

impl NodeStore {
    pub fn load(node: NodeId, placement: &PlacementMap, cfg: &LoadConfig) -> NodeStore {
        let partitions = placement
            .hosted_by(node)
            .map(|p| {
                let role = placement.role_of(p, node).unwrap();
                (p, Partition::load(p, role, cfg))
            })
            .collect();
        NodeStore { node, value_size: cfg.value_size, partitions, closed_epoch: 0 }
    }

    pub fn closed_epoch(&self) -> Epoch {
        self.closed_epoch
    }

    pub fn partition(&self, p: PartitionId) -> Option<&Partition> {
        self.partitions.get(&p)
    }

    pub fn partition_ids(&self) -> impl Iterator<Item = PartitionId> + '_ {
        self.partitions.keys().copied()
    }

    pub fn role(&self, p: PartitionId) -> Option<Role> {
        self.partitions.get(&p).map(|part| part.role)
    }

    pub fn set_role(&mut self, p: PartitionId, role: Role) {
        if let Some(part) = self.partitions.get_mut(&p) {
            part.role = role;
        }
    }

    pub fn hosts(&self, key: Key) -> bool {
        self.record(key).is_some()
    }

    fn record(&self, key: Key) -> Option<&Mutex<Record>> {
        self.partitions.get(&key.partition)?.rows.get(key.row as usize)
    }

    fn expect_record(&self, key: Key) -> &Mutex<Record> {
        self.record(key).unwrap_or_else(|| panic!("node {} does not host {key}", self.node))
    }

    /// Reads a local copy, primary or backup. `None` means the caller must
    /// go to a remote replica.
    pub fn local_read(&self, key: Key) -> Option<ReadResult> {
        let rec = self.record(key)?.lock();
        Some(ReadResult { value: rec.value.clone(), wts: rec.meta.wts, rts: rec.meta.rts })
    }

    pub fn snapshot_meta(&self, key: Key) -> Option<MetaSnapshot> {
        Some(self.record(key)?.lock().meta.snapshot())
    }

    /// Overwrites a record outside any transaction, as part of the closed
    /// state. Used to set up scenarios.
    pub fn seed_version(&self, key: Key, value: &[u8], wts: LogicalTs, rts: LogicalTs) {
        let mut rec = self.expect_record(key).lock();
        rec.value.copy_from_slice(value);
        rec.meta = TsMeta::new(wts, rts);
        rec.shadow = None;
        rec.write_epoch = self.closed_epoch;
    }

    /// Full record state, for tests and audits.
    pub fn inspect(&self, key: Key) -> Option<Record> {
        Some(self.record(key)?.lock().clone())
    }

    /// NO_WAIT exclusive lock. With `expected_wts` set, fails as stale when
    /// the record changed since it was read.
    pub fn try_lock(&self, key: Key, expected_wts: Option<LogicalTs>, txn: TxnId) -> LockOutcome {
        let mut rec = self.expect_record(key).lock();
        if rec.meta.locked_by_other(txn) || rec.readers.iter().any(|&r| r != txn) {
            return LockOutcome::Busy;
        }
        if let Some(expected) = expected_wts {
            if rec.meta.wts != expected {
                return LockOutcome::Stale { wts: rec.meta.wts };
            }
        }
        rec.meta.lock_owner = Some(txn);
        LockOutcome::Acquired { wts: rec.meta.wts, rts: rec.meta.rts }
    }

    /// NO_WAIT shared lock, used by two-phase locking.
    pub fn try_lock_shared(&self, key: Key, txn: TxnId) -> bool {
        let mut rec = self.expect_record(key).lock();
        if rec.meta.locked_by_other(txn) {
            return false;
        }
        if !rec.readers.contains(&txn) {
            rec.readers.push(txn);
        }
        true
    }

    /// Releases whatever `txn` holds on `key`.
    pub fn unlock(&self, key: Key, txn: TxnId) {
        let mut rec = self.expect_record(key).lock();
        if rec.meta.lock_owner == Some(txn) {
            rec.meta.lock_owner = None;
        }
        rec.readers.retain(|&r| r != txn);
    }

    /// Installs a committed write at the primary and releases the lock.
    pub fn primary_apply(&self, key: Key, value: &[u8], cts: LogicalTs, epoch: Epoch, txn: TxnId) {
        let mut rec = self.expect_record(key).lock();
        assert_eq!(rec.meta.lock_owner, Some(txn), "primary write to {key} without holding its lock");
        debug_assert!(cts > rec.meta.wts, "primary wts must grow");
        rec.install(value, cts, epoch);
        rec.meta.lock_owner = None;
        rec.readers.retain(|&r| r != txn);
    }

    /// Thomas write rule: apply iff `cts` is newer than the stored version.
    pub fn replica_apply(&self, key: Key, value: &[u8], cts: LogicalTs, epoch: Epoch) -> ApplyOutcome {
        let mut rec = self.expect_record(key).lock();
        if cts > rec.meta.wts {
            rec.install(value, cts, epoch);
            ApplyOutcome::Applied
        } else {
            ApplyOutcome::Skipped
        }
    }

    /// Extends the read validity of the version written at `expected_wts`
    /// through `target`. A lock held by `txn` itself does not block.
    pub fn extend_rts(&self, key: Key, expected_wts: LogicalTs, target: LogicalTs, txn: TxnId) -> ExtendOutcome {
        let mut rec = self.expect_record(key).lock();
        let meta = &mut rec.meta;
        if meta.wts != expected_wts {
            return ExtendOutcome::Stale { wts: meta.wts };
        }
        if meta.rts < target {
            if meta.locked_by_other(txn) {
                return ExtendOutcome::Blocked;
            }
            meta.rts = target;
        }
        ExtendOutcome::Extended { wts: meta.wts, rts: meta.rts }
    }

    /// Version comparison used by the physical-version OCC baseline.
    pub fn check_version(&self, key: Key, expected_wts: LogicalTs, txn: TxnId) -> VersionCheck {
        let rec = self.expect_record(key).lock();
        if rec.meta.wts != expected_wts {
            VersionCheck::Changed
        } else if rec.meta.locked_by_other(txn) {
            VersionCheck::Locked
        } else {
            VersionCheck::Unchanged
        }
    }

    /// Timestamp synchronization on a backup: raise `rts` only when the
    /// replica holds the same version.
    pub fn update_rts(&self, key: Key, wts: LogicalTs, rts: LogicalTs) -> bool {
        let Some(cell) = self.record(key) else { return false };
        let mut rec = cell.lock();
        if rec.meta.wts == wts && rts > rec.meta.rts {
            rec.meta.rts = rts;
            true
        } else {
            false
        }
    }

    /// Raises every record's `rts` in partition `p` to at least `floor`.
    pub fn raise_rts_floor(&self, p: PartitionId, floor: LogicalTs) {
        if let Some(part) = self.partitions.get(&p) {
            for cell in &part.rows {
                let mut rec = cell.lock();
                if rec.meta.rts < floor {
                    rec.meta.rts = floor;
                }
            }
        }
    }

    /// Marks `epoch` closed. Shadows are taken lazily on the first write of
    /// a later epoch, so closing only moves the rollback horizon.
    pub fn close_epoch_snapshot(&mut self, epoch: Epoch) {
        debug_assert!(epoch >= self.closed_epoch);
        self.closed_epoch = epoch;
    }

    /// Reverts every record written after the last closed epoch and drops
    /// all locks. Returns the number of records reverted.
    pub fn rollback_to_shadow(&mut self) -> usize {
        let closed = self.closed_epoch;
        let mut reverted = 0;
        for part in self.partitions.values_mut() {
            for cell in &mut part.rows {
                let rec = cell.get_mut();
                rec.meta.lock_owner = None;
                rec.readers.clear();
                if rec.write_epoch > closed {
                    let shadow = rec.shadow.take().expect("record written in open epoch without shadow");
                    rec.value = shadow.value;
                    rec.meta.wts = shadow.wts;
                    rec.meta.rts = shadow.rts;
                    rec.write_epoch = shadow.epoch;
                    reverted += 1;
                }
            }
        }
        reverted
    }

    /// Drops all locks without touching data.
    pub fn clear_locks(&mut self) {
        for part in self.partitions.values_mut() {
            for cell in &mut part.rows {
                let rec = cell.get_mut();
                rec.meta.lock_owner = None;
                rec.readers.clear();
            }
        }
    }

    /// Resets partition `p` to its load state ahead of a recovery copy.
    pub fn wipe_partition(&mut self, p: PartitionId) {
        if let Some(part) = self.partitions.get_mut(&p) {
            for (row, cell) in part.rows.iter_mut().enumerate() {
                *cell.get_mut() = Record::loaded(initial_value(Key::new(p, row as u64), self.value_size));
            }
        }
    }

    /// Ensures partition `p` exists locally with `role`, loading it fresh if
    /// this node never hosted it.
    pub fn ensure_partition(&mut self, p: PartitionId, role: Role, cfg: &LoadConfig) {
        self.partitions.entry(p).or_insert_with(|| Partition::load(p, role, cfg)).role = role;
    }

    /// Snapshot of partition `p` for a recovering replica.
    pub fn copy_partition(&self, p: PartitionId) -> Vec<CopyRecord> {
        let closed_epoch = self.closed_epoch;
        let part = &self.partitions[&p];
        part.rows
            .iter()
            .enumerate()
            .map(|(row, cell)| {
                let rec = cell.lock();
                let (value, wts, rts) = rec.closed_state(closed_epoch);
                let closed = ReadResult { value: value.into(), wts, rts };
                let live = (rec.write_epoch > closed_epoch).then(|| ReadResult {
                    value: rec.value.clone(),
                    wts: rec.meta.wts,
                    rts: rec.meta.rts,
                });
                CopyRecord { row: row as u64, closed, live }
            })
            .collect()
    }

    /// Merges a recovery copy. The closed state becomes the rollback shadow;
    /// the live state is whichever of the copy and any locally replicated
    /// write is newer.
    pub fn install_copy(&mut self, p: PartitionId, records: &[CopyRecord], current_epoch: Epoch) {
        let closed_epoch = self.closed_epoch;
        let part = self.partitions.get_mut(&p).expect("copy for unhosted partition");
        for cr in records {
            let rec = part.rows[cr.row as usize].get_mut();
            let locally_written = rec.write_epoch > closed_epoch;
            let shadow = Shadow {
                value: cr.closed.value.clone(),
                wts: cr.closed.wts,
                rts: cr.closed.rts,
                epoch: closed_epoch,
            };
            // Newest candidate for the live state.
            let mut live = cr.live.clone().unwrap_or_else(|| cr.closed.clone());
            if locally_written && rec.meta.wts >= live.wts {
                let rts = if rec.meta.wts == live.wts { rec.meta.rts.max(live.rts) } else { rec.meta.rts };
                live = ReadResult { value: rec.value.clone(), wts: rec.meta.wts, rts };
            }
            let modified = cr.live.is_some() || locally_written;
            rec.value = live.value;
            rec.meta.wts = live.wts;
            rec.meta.rts = live.rts;
            rec.meta.lock_owner = None;
            rec.readers.clear();
            if modified {
                rec.write_epoch = current_epoch.max(closed_epoch + 1);
                rec.shadow = Some(Box::new(shadow));
            } else {
                rec.write_epoch = closed_epoch;
                rec.shadow = None;
            }
        }
    }

    /// `(value, wts)` of every row in partition `p`.
    pub fn dump(&self, p: PartitionId) -> Vec<(Box<[u8]>, LogicalTs)> {
        self.partitions[&p].rows.iter().map(|c| {
            let rec = c.lock();
            (rec.value.clone(), rec.meta.wts)
        }).collect()
    }

    /// `(value, wts)` of every row in partition `p` as of the last closed
    /// epoch.
    pub fn dump_closed(&self, p: PartitionId) -> Vec<(Box<[u8]>, LogicalTs)> {
        let closed = self.closed_epoch;
        self.partitions[&p].rows.iter().map(|c| {
            let rec = c.lock();
            let (v, w, _) = rec.closed_state(closed);
            (v.into(), w)
        }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(v: u64) -> LogicalTs {
        LogicalTs(v)
    }

    fn t(seq: u32) -> TxnId {
        TxnId::new(0, 0, seq)
    }

    fn store(rows: u64) -> (PlacementMap, NodeStore, NodeStore) {
        let placement = PlacementMap::round_robin(2, 2, 2);
        let cfg = LoadConfig { partitions: 2, rows_per_partition: rows, value_size: 16 };
        let n0 = NodeStore::load(0, &placement, &cfg);
        let n1 = NodeStore::load(1, &placement, &cfg);
        (placement, n0, n1)
    }

    fn set_meta(s: &NodeStore, key: Key, wts: u64, rts: u64) {
        let mut rec = s.expect_record(key).lock();
        rec.meta.wts = ts(wts);
        rec.meta.rts = ts(rts);
    }

    fn meta(s: &NodeStore, key: Key) -> (u64, u64) {
        let m = s.snapshot_meta(key).unwrap();
        (m.wts.0, m.rts.0)
    }

    #[test]
    fn placement_round_robin_is_distinct() {
        let p = PlacementMap::round_robin(8, 4, 3);
        for part in 0..8 {
            let r = p.replicas(part);
            assert_eq!(r.len(), 3);
            assert_eq!(r[0], (part % 4) as NodeId);
            let mut s = r.to_vec();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
    }

    #[test]
    fn placement_failover_promotes_next_replica() {
        let mut p = PlacementMap::round_robin(4, 4, 3);
        let change = p.remove_node(1);
        // Partition 1 was mastered on node 1.
        assert_eq!(change.promoted, vec![(1, 2)]);
        assert!(change.lost.is_empty());
        assert_eq!(p.primary(1), Some(2));
        // Partition 0 lost a backup only.
        assert_eq!(p.replicas(0), &[0, 2]);
        p.add_backup(1, 1);
        assert_eq!(p.role_of(1, 1), Some(Role::Backup));
    }

    #[test]
    fn placement_reports_lost_partitions() {
        let mut p = PlacementMap::round_robin(2, 2, 1);
        let change = p.remove_node(0);
        assert_eq!(change.lost, vec![0]);
    }

    #[test]
    fn local_read_hits_primary_and_backup() {
        let placement = PlacementMap::round_robin(3, 3, 2);
        let cfg = LoadConfig { partitions: 3, rows_per_partition: 4, value_size: 8 };
        let n0 = NodeStore::load(0, &placement, &cfg);
        // Node 0 is primary of 0 and backup of 2; it has no copy of 1.
        assert!(n0.local_read(Key::new(0, 1)).is_some());
        let r = n0.local_read(Key::new(2, 1)).unwrap();
        assert_eq!(r.value, initial_value(Key::new(2, 1), 8));
        assert_eq!((r.wts, r.rts), (ts(0), ts(0)));
        assert!(n0.local_read(Key::new(1, 1)).is_none());
        assert_eq!(n0.role(2), Some(Role::Backup));
    }

    #[test]
    fn snapshot_meta_examples() {
        let (_, n0, _) = store(2);
        let k = Key::new(0, 0);
        assert_eq!(n0.snapshot_meta(k).unwrap(), MetaSnapshot { wts: ts(0), rts: ts(0), locked: false });
        set_meta(&n0, k, 5, 15);
        assert!(matches!(n0.try_lock(k, Some(ts(5)), t(1)), LockOutcome::Acquired { .. }));
        assert!(n0.snapshot_meta(k).unwrap().locked);
        n0.primary_apply(k, &[1; 16], ts(16), 1, t(1));
        assert_eq!(n0.snapshot_meta(k).unwrap(), MetaSnapshot { wts: ts(16), rts: ts(16), locked: false });
    }

    #[test]
    fn try_lock_outcomes() {
        let (_, n0, _) = store(2);
        let k = Key::new(0, 0);
        set_meta(&n0, k, 5, 7);
        assert_eq!(n0.try_lock(k, Some(ts(5)), t(1)), LockOutcome::Acquired { wts: ts(5), rts: ts(7) });
        assert_eq!(n0.try_lock(k, Some(ts(5)), t(2)), LockOutcome::Busy);
        n0.unlock(k, t(1));
        set_meta(&n0, k, 9, 9);
        assert_eq!(n0.try_lock(k, Some(ts(5)), t(2)), LockOutcome::Stale { wts: ts(9) });
        // Blind writes carry no expectation.
        assert!(matches!(n0.try_lock(k, None, t(2)), LockOutcome::Acquired { .. }));
    }

    #[test]
    fn shared_and_exclusive_locks_conflict() {
        let (_, n0, _) = store(2);
        let k = Key::new(0, 1);
        assert!(n0.try_lock_shared(k, t(1)));
        assert!(n0.try_lock_shared(k, t(2)));
        assert_eq!(n0.try_lock(k, None, t(3)), LockOutcome::Busy);
        n0.unlock(k, t(2));
        // Sole reader may upgrade.
        assert!(matches!(n0.try_lock(k, None, t(1)), LockOutcome::Acquired { .. }));
        assert!(!n0.try_lock_shared(k, t(2)));
    }

    #[test]
    fn primary_apply_examples() {
        let (_, n0, _) = store(2);
        let k = Key::new(0, 0);
        set_meta(&n0, k, 5, 15);
        n0.try_lock(k, Some(ts(5)), t(1));
        n0.primary_apply(k, &[7; 16], ts(16), 1, t(1));
        assert_eq!(meta(&n0, k), (16, 16));

        set_meta(&n0, k, 10, 20);
        n0.try_lock(k, Some(ts(10)), t(2));
        n0.primary_apply(k, &[7; 16], ts(21), 1, t(2));
        assert_eq!(meta(&n0, k), (21, 21));
        assert_eq!(&*n0.local_read(k).unwrap().value, &[7; 16]);
    }

    #[test]
    #[should_panic(expected = "without holding its lock")]
    fn primary_apply_requires_lock() {
        let (_, n0, _) = store(2);
        n0.primary_apply(Key::new(0, 0), &[0; 16], ts(1), 1, t(1));
    }

    #[test]
    fn replica_apply_thomas_rule() {
        let (_, _, n1) = store(2);
        // Node 1 backs up partition 0.
        let k = Key::new(0, 0);
        set_meta(&n1, k, 10, 10);
        assert_eq!(n1.replica_apply(k, &[1; 16], ts(21), 1), ApplyOutcome::Applied);
        assert_eq!(meta(&n1, k), (21, 21));
        set_meta(&n1, k, 7, 7);
        assert_eq!(n1.replica_apply(k, &[2; 16], ts(5), 1), ApplyOutcome::Skipped);
        set_meta(&n1, k, 5, 5);
        assert_eq!(n1.replica_apply(k, &[2; 16], ts(5), 1), ApplyOutcome::Skipped);
        assert_eq!(&*n1.local_read(k).unwrap().value, &[1; 16]);
    }

    #[test]
    fn extend_rts_examples() {
        let (_, n0, _) = store(2);
        let k = Key::new(0, 0);
        set_meta(&n0, k, 2, 2);
        assert_eq!(n0.extend_rts(k, ts(2), ts(4), t(1)), ExtendOutcome::Extended { wts: ts(2), rts: ts(4) });
        assert_eq!(meta(&n0, k), (2, 4));
        set_meta(&n0, k, 6, 6);
        assert_eq!(n0.extend_rts(k, ts(2), ts(8), t(1)), ExtendOutcome::Stale { wts: ts(6) });

        set_meta(&n0, k, 2, 2);
        n0.try_lock(k, Some(ts(2)), t(9));
        assert_eq!(n0.extend_rts(k, ts(2), ts(4), t(1)), ExtendOutcome::Blocked);
        // Already valid at the target despite the lock.
        assert_eq!(n0.extend_rts(k, ts(2), ts(2), t(1)), ExtendOutcome::Extended { wts: ts(2), rts: ts(2) });
        // The lock holder itself may extend.
        assert!(matches!(n0.extend_rts(k, ts(2), ts(4), t(9)), ExtendOutcome::Extended { .. }));
    }

    #[test]
    fn ts_sync_rule() {
        let (_, _, n1) = store(2);
        let k = Key::new(0, 0);
        set_meta(&n1, k, 5, 10);
        assert!(n1.update_rts(k, ts(5), ts(18)));
        assert_eq!(meta(&n1, k), (5, 18));
        set_meta(&n1, k, 6, 6);
        assert!(!n1.update_rts(k, ts(5), ts(18)));
        assert_eq!(meta(&n1, k), (6, 6));
        set_meta(&n1, k, 5, 20);
        assert!(!n1.update_rts(k, ts(5), ts(18)));
        assert_eq!(meta(&n1, k), (5, 20));
    }

    #[test]
    fn rollback_examples() {
        let (_, mut n0, _) = store(3);
        let a = Key::new(0, 0);
        let b = Key::new(0, 1);
        let untouched = Key::new(0, 2);
        let before_untouched = n0.inspect(untouched).unwrap();

        // Epoch 1 writes a, then closes.
        n0.try_lock(a, None, t(1));
        n0.primary_apply(a, &[1; 16], ts(3), 1, t(1));
        n0.close_epoch_snapshot(1);
        // Epoch 2 writes a and b, then fails.
        n0.try_lock(a, None, t(2));
        n0.primary_apply(a, &[2; 16], ts(5), 2, t(2));
        n0.try_lock(b, None, t(2));
        n0.primary_apply(b, &[2; 16], ts(5), 2, t(2));
        assert_eq!(n0.rollback_to_shadow(), 2);

        assert_eq!(&*n0.local_read(a).unwrap().value, &[1; 16]);
        assert_eq!(meta(&n0, a), (3, 3));
        assert_eq!(n0.local_read(b).unwrap().value, initial_value(b, 16));
        assert_eq!(meta(&n0, b), (0, 0));
        let after = n0.inspect(untouched).unwrap();
        assert_eq!((after.value, after.meta), (before_untouched.value, before_untouched.meta));
    }

    #[test]
    fn rollback_keeps_rts_extensions_on_unwritten_records() {
        let (_, mut n0, _) = store(1);
        let k = Key::new(0, 0);
        n0.extend_rts(k, ts(0), ts(9), t(1));
        n0.rollback_to_shadow();
        assert_eq!(meta(&n0, k), (0, 9));
    }

    #[test]
    fn recovery_copy_merges_with_replicated_writes() {
        let (_, mut n0, mut n1) = store(2);
        let a = Key::new(0, 0);
        let b = Key::new(0, 1);
        // Closed epoch 1 state on the primary.
        n0.try_lock(a, None, t(1));
        n0.primary_apply(a, &[1; 16], ts(4), 1, t(1));
        n0.close_epoch_snapshot(1);
        n1.close_epoch_snapshot(1);
        // Open epoch 2: b written at the primary.
        n0.try_lock(b, None, t(2));
        n0.primary_apply(b, &[2; 16], ts(6), 2, t(2));

        // Node 1 recovers: wiped, then a newer write to a arrives before the copy.
        n1.wipe_partition(0);
        n1.replica_apply(a, &[3; 16], ts(8), 2);
        let copy = n0.copy_partition(0);
        n1.install_copy(0, &copy, 2);

        assert_eq!(meta(&n1, a), (8, 8));
        assert_eq!(meta(&n1, b), (6, 6));
        assert_eq!(n1.dump_closed(0), n0.dump_closed(0));
        // Rolling the open epoch back lands on the closed state everywhere.
        n0.rollback_to_shadow();
        n1.rollback_to_shadow();
        assert_eq!(n1.dump(0), n0.dump(0));
    }

    #[test]
    fn concurrent_lockers_are_exclusive() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let (_, n0, _) = store(1);
        let store = Arc::new(n0);
        let holders = Arc::new(AtomicUsize::new(0));
        let k = Key::new(0, 0);
        let handles: Vec<_> = (0..4)
            .map(|w| {
                let store = Arc::clone(&store);
                let holders = Arc::clone(&holders);
                std::thread::spawn(move || {
                    let mut acquired = 0;
                    for i in 0..2000u32 {
                        let txn = TxnId::new(0, w, i);
                        if let LockOutcome::Acquired { wts, .. } = store.try_lock(k, None, txn) {
                            assert_eq!(holders.fetch_add(1, Ordering::SeqCst), 0);
                            let snap = store.snapshot_meta(k).unwrap();
                            assert!(snap.locked && snap.wts <= snap.rts);
                            holders.fetch_sub(1, Ordering::SeqCst);
                            store.primary_apply(k, &[w as u8; 16], wts.successor(), 1, txn);
                            acquired += 1;
                        }
                    }
                    acquired
                })
            })
            .collect();
        let total: u64 = handles.into_iter().map(|h| h.join().unwrap()).sum();
        let m = store.snapshot_meta(k).unwrap();
        // Every successful locker bumped wts by exactly one.
        assert_eq!(m.wts.0, total);
        assert!(!m.locked);
    }

    proptest! {
        #[test]
        fn thomas_rule_is_order_independent(
            writes in prop::collection::vec((1u64..50, any::<u8>()), 1..30),
            perm_seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            // Unique timestamps per key, as the primary guarantees.
            let mut writes = writes;
            writes.sort_by_key(|w| w.0);
            writes.dedup_by_key(|w| w.0);
            let (_, _, a) = store(1);
            let (_, _, b) = store(1);
            let k = Key::new(0, 0);
            for (c, v) in &writes {
                a.replica_apply(k, &[*v; 16], ts(*c), 1);
            }
            let mut shuffled = writes.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            for (c, v) in &shuffled {
                b.replica_apply(k, &[*v; 16], ts(*c), 1);
            }
            let (last_c, last_v) = writes.last().unwrap();
            prop_assert_eq!(a.dump(0), b.dump(0));
            prop_assert_eq!(meta(&b, k).0, *last_c);
            prop_assert_eq!(&*b.local_read(k).unwrap().value, &[*last_v; 16]);
        }

        #[test]
        fn rollback_restores_last_closed_state(
            epoch1 in prop::collection::vec((0u64..4, any::<u8>()), 0..12),
            epoch2 in prop::collection::vec((0u64..4, any::<u8>()), 0..12),
        ) {
            let (_, mut n0, _) = store(4);
            let mut next = 1u64;
            for (row, v) in &epoch1 {
                let k = Key::new(0, *row);
                n0.try_lock(k, None, t(1));
                n0.primary_apply(k, &[*v; 16], ts(next), 1, t(1));
                next += 1;
            }
            n0.close_epoch_snapshot(1);
            let closed = n0.dump(0);
            prop_assert_eq!(&n0.dump_closed(0), &closed);
            for (row, v) in &epoch2 {
                let k = Key::new(0, *row);
                n0.try_lock(k, None, t(2));
                n0.primary_apply(k, &[*v; 16], ts(next), 2, t(2));
                next += 1;
            }
            prop_assert_eq!(&n0.dump_closed(0), &closed);
            n0.rollback_to_shadow();
            prop_assert_eq!(n0.dump(0), closed);
        }
    }
}
