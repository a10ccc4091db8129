//! Comparison protocols running on the same cluster machinery.
//!
//! * OCC: Silo-style. Lock the write set, then check that every read
//!   version is still current and unlocked at its primary. Reads may come
//!   from local backups, but a read can never be validated locally.
//! * RC: OCC without read validation.
//! * S2PL: shared and exclusive locks taken at the primary during
//!   execution (NO_WAIT); writes are replicated synchronously before any
//!   lock is released.
//!
//! OCC and RC commit asynchronously under epoch group commit like SCAR.

use std::collections::BTreeMap;

use crate::cluster::{Cluster, Protocol, Stage, Timer};
use crate::scar_engine::TxnContext;
use crate::storage::{Key, NodeId};
use crate::timestamps::LogicalTs;
use crate::transport::{Network, Payload, ValidateItem, ValidateMode, WriteItem};

/// Commit version of a baseline transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tid(pub u64);

impl Tid {
    /// One past every version the transaction observed or overwrites, so
    /// per-record versions strictly increase at the primary.
    pub fn for_commit(ctx: &TxnContext) -> Tid {
        let max = ctx.read_set.iter().chain(&ctx.write_set).map(|e| e.wts).max().unwrap_or(LogicalTs::ZERO);
        Tid(max.get() + 1)
    }

    pub fn ts(self) -> LogicalTs {
        LogicalTs(self.0)
    }
}

impl<N: Network<Timer>> Cluster<N> {
    pub(crate) fn occ_validate(&mut self, node: NodeId, ctx: &mut TxnContext) {
        if ctx.write_set.is_empty() {
            self.assign_seq(ctx);
            self.validate_versions(node, ctx);
        } else {
            self.lock_write_set(node, ctx, Stage::Lock);
        }
    }

    pub(crate) fn occ_round_done(&mut self, node: NodeId, ctx: &mut TxnContext) {
        match ctx.stage {
            Stage::Lock => {
                self.assign_seq(ctx);
                self.validate_versions(node, ctx);
            }
            Stage::ValidateVersions => {
                let tid = Tid::for_commit(ctx).ts();
                ctx.cts = tid;
                ctx.crts = tid;
                ctx.serializable_flag = true;
                self.commit(node, ctx);
            }
            stage => unreachable!("round completed in stage {stage:?}"),
        }
    }

    fn validate_versions(&mut self, node: NodeId, ctx: &mut TxnContext) {
        ctx.stage = Stage::ValidateVersions;
        if self.cfg.protocol == Protocol::Rc {
            return;
        }
        let items: Vec<ValidateItem> = ctx
            .read_set
            .iter()
            .filter(|e| ctx.write_entry(e.key).is_none())
            .map(|e| ValidateItem { key: e.key, wts: e.wts, target: e.wts })
            .collect();
        let remote = self.issue_validation(node, ctx, items, ValidateMode::Version);
        ctx.remote_validate |= remote > 0;
        if remote > 0 {
            ctx.rounds += 1;
        }
        ctx.pending += remote;
    }

    /// Every lock is held once execution ends; replicate, then release.
    pub(crate) fn s2pl_commit(&mut self, node: NodeId, ctx: &mut TxnContext) {
        self.assign_seq(ctx);
        let tid = Tid::for_commit(ctx).ts();
        ctx.cts = tid;
        ctx.crts = tid;
        ctx.serializable_flag = true;
        ctx.epoch = self.nodes[node as usize].epoch;
        ctx.stage = Stage::Replicate;
        let items = Self::write_items(ctx);
        let epoch = ctx.epoch;
        let remote = self.replicate(node, ctx, &items, epoch);
        ctx.remote_lock = ctx.write_set.iter().any(|e| self.primary_of(e.key) != node);
        if remote > 0 {
            ctx.rounds += 1;
        }
        ctx.pending += remote;
    }

    pub(crate) fn s2pl_round_done(&mut self, node: NodeId, ctx: &mut TxnContext) {
        debug_assert_eq!(ctx.stage, Stage::Replicate);
        let epoch = ctx.epoch;
        let mut per_node: BTreeMap<NodeId, (Vec<WriteItem>, Vec<Key>)> = BTreeMap::new();
        for item in Self::write_items(ctx) {
            per_node.entry(self.primary_of(item.key)).or_default().0.push(item);
        }
        for &k in &ctx.shared_locks {
            if ctx.write_entry(k).is_none() {
                per_node.entry(self.primary_of(k)).or_default().1.push(k);
            }
        }
        let mut remote = 0;
        for (primary, (writes, release)) in per_node {
            if primary == node {
                let store = &self.nodes[node as usize].store;
                for it in &writes {
                    store.primary_apply(it.key, &it.value, ctx.cts, epoch, ctx.tid);
                }
                for k in release {
                    store.unlock(k, ctx.tid);
                }
            } else if writes.is_empty() {
                self.send_for(ctx, node, primary, Payload::Unlock { txn: ctx.tid, keys: release });
            } else {
                let payload = Payload::WriteReq { txn: ctx.tid, epoch, cts: ctx.cts, items: writes, release };
                self.send_for(ctx, node, primary, payload);
                remote += 1;
            }
        }
        self.nodes[node as usize].pending_acks += remote;
        self.finish_commit(node, ctx);
    }
}
