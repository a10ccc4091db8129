//! Epoch-based group commit and failure handling.
//!
//! Time is cut into epochs by a global barrier. The manager (the lowest
//! live node) asks every node to stop starting transactions; a node acks
//! once its running transactions are finished and every write it sent has
//! been acknowledged. When all acks are in, the epoch closes: its commits
//! become durable and are reported, and every store moves its rollback
//! horizon forward.
//!
//! A failure rolls every live replica back to the last closed epoch,
//! promotes backups of the dead node's partitions and aborts everything in
//! flight. A recovering node rejoins as a backup at the next epoch close and
//! copies its partitions from the current primaries.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::cluster::{Cluster, ClusterError, Timer};
use crate::storage::{CopyRecord, Epoch, Key, NodeId, NodeStore, PartitionId, Role};
use crate::timestamps::LogicalTs;
use crate::transport::{BarrierPhase, Network, Payload, SimTime, SyncItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FailureAction {
    Fail,
    Recover,
}

/// One entry of a failure schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FailureEvent {
    pub at: SimTime,
    pub action: FailureAction,
    pub node: NodeId,
}

impl fmt::Display for FailureEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let action = match self.action {
            FailureAction::Fail => "fail",
            FailureAction::Recover => "recover",
        };
        write!(f, "{}us:{action}:{}", self.at / 1_000, self.node)
    }
}

impl FromStr for FailureEvent {
    type Err = String;

    /// `<time>:<fail|recover>:<node>`, time in microseconds with an optional
    /// `us`, `ms` or `s` suffix.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [time, action, node] = parts[..] else {
            return Err(format!("expected <time>:<fail|recover>:<node>, got {s:?}"));
        };
        let (digits, scale) = if let Some(t) = time.strip_suffix("ms") {
            (t, 1_000_000)
        } else if let Some(t) = time.strip_suffix("us") {
            (t, 1_000)
        } else if let Some(t) = time.strip_suffix('s') {
            (t, 1_000_000_000)
        } else {
            (time, 1_000)
        };
        let at = digits.parse::<u64>().map_err(|e| format!("bad time {time:?}: {e}"))? * scale;
        let action = match action {
            "fail" => FailureAction::Fail,
            "recover" => FailureAction::Recover,
            other => return Err(format!("unknown failure action {other:?}")),
        };
        let node = node.parse().map_err(|e| format!("bad node {node:?}: {e}"))?;
        Ok(FailureEvent { at, action, node })
    }
}

/// `rts` extensions made at primaries, bound for one backup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncBatch {
    pub items: Vec<SyncItem>,
}

impl SyncBatch {
    /// Applies the batch on a backup; only `rts` can change.
    pub fn apply(&self, store: &NodeStore) -> usize {
        self.items.iter().filter(|i| store.update_rts(i.key, i.wts, i.rts)).count()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Barrier {
    pub(crate) epoch: Epoch,
    pub(crate) manager: NodeId,
    pub(crate) acks: BTreeSet<NodeId>,
    pub(crate) max_ts: LogicalTs,
}

#[derive(Debug, Clone)]
pub struct EpochState {
    /// The open epoch.
    pub current: Epoch,
    /// The last closed epoch; 0 is the loaded state.
    pub closed: Epoch,
    /// Largest commit timestamp of any closed epoch.
    pub closed_max_ts: LogicalTs,
    pub interval: SimTime,
    pub(crate) barrier: Option<Barrier>,
    /// (seq, epoch) of commits decided but not yet reported.
    pub(crate) pending: Vec<(u64, Epoch)>,
    /// Seqs reported committed, in report order.
    pub reported: Vec<u64>,
    pub(crate) recoveries: Vec<NodeId>,
    pub failures: u64,
}

impl EpochState {
    pub fn new(interval: SimTime) -> EpochState {
        EpochState {
            current: 1,
            closed: 0,
            closed_max_ts: LogicalTs::ZERO,
            interval,
            barrier: None,
            pending: Vec::new(),
            reported: Vec::new(),
            recoveries: Vec::new(),
            failures: 0,
        }
    }

    /// Commits decided but not yet durable.
    pub fn unreported(&self) -> usize {
        self.pending.len()
    }
}

/// Snapshot of the system right after a failure's rollback.
#[derive(Debug, Clone)]
pub struct FailureAudit {
    pub at: SimTime,
    pub node: NodeId,
    pub closed_epoch: Epoch,
    /// Seqs reported committed before the failure.
    pub reported: Vec<u64>,
    /// Seqs of commits undone by the rollback.
    pub rolled_back: Vec<u64>,
    /// Length of the committed history after the rollback; later failures
    /// only remove entries past this prefix.
    pub history_len: usize,
    /// Contents of every live replica.
    pub replicas: Vec<(NodeId, PartitionId, ReplicaRows)>,
}

/// `(value, wts)` per row of one replica.
pub type ReplicaRows = Vec<(Box<[u8]>, LogicalTs)>;

impl<N: Network<Timer>> Cluster<N> {
    pub(crate) fn ensure_ticking(&mut self) {
        if !self.ticking {
            self.ticking = true;
            let at = self.net.now() + self.epochs.interval;
            self.net.schedule(at, Timer::EpochTick);
        }
    }

    pub(crate) fn on_epoch_tick(&mut self) {
        self.ticking = false;
        if !self.work_remaining() {
            return;
        }
        if self.epochs.barrier.is_none() {
            self.start_barrier();
        }
        self.ensure_ticking();
    }

    fn start_barrier(&mut self) {
        let manager = self.live_nodes().next().expect("at least one live node");
        let epoch = self.epochs.current;
        self.epochs.barrier = Some(Barrier { epoch, manager, acks: BTreeSet::new(), max_ts: LogicalTs::ZERO });
        for n in self.live_nodes().collect::<Vec<_>>() {
            if n == manager {
                self.on_barrier(n, epoch, BarrierPhase::Prepare);
            } else {
                self.net.send(manager, n, Payload::EpochBarrier { epoch, phase: BarrierPhase::Prepare });
            }
        }
    }

    fn live_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.alive).map(|(i, _)| i as NodeId)
    }

    pub(crate) fn on_barrier(&mut self, node: NodeId, epoch: Epoch, phase: BarrierPhase) {
        match phase {
            BarrierPhase::Prepare => {
                if self.epochs.barrier.as_ref().is_none_or(|b| b.epoch != epoch) {
                    return;
                }
                let n = &mut self.nodes[node as usize];
                n.paused = true;
                n.acked = false;
                self.maybe_ack_barrier(node);
            }
            BarrierPhase::Commit => {
                self.nodes[node as usize].paused = false;
                self.resume_workers(node);
            }
        }
    }

    /// Acks the running barrier once the node has drained.
    pub(crate) fn maybe_ack_barrier(&mut self, node: NodeId) {
        let Some(b) = &self.epochs.barrier else { return };
        let (epoch, manager) = (b.epoch, b.manager);
        let n = &mut self.nodes[node as usize];
        if !n.alive || !n.paused || n.acked || !n.quiescent() {
            return;
        }
        n.acked = true;
        let max_ts = std::mem::replace(&mut n.max_ts, LogicalTs::ZERO);
        if node == manager {
            self.on_barrier_ack(node, epoch, max_ts);
        } else {
            self.net.send(node, manager, Payload::BarrierAck { epoch, max_ts });
        }
    }

    pub(crate) fn on_barrier_ack(&mut self, from: NodeId, epoch: Epoch, max_ts: LogicalTs) {
        let Some(b) = self.epochs.barrier.as_mut() else { return };
        if b.epoch != epoch {
            return;
        }
        b.acks.insert(from);
        b.max_ts = b.max_ts.max(max_ts);
        let acks = b.acks.clone();
        if self.live_nodes().all(|n| acks.contains(&n)) {
            self.close_epoch();
        }
    }

    fn close_epoch(&mut self) {
        let b = self.epochs.barrier.take().expect("closing without a barrier");
        let e = b.epoch;
        self.epochs.closed = e;
        self.epochs.closed_max_ts = self.epochs.closed_max_ts.max(b.max_ts);
        self.epochs.current = e + 1;
        let pending = std::mem::take(&mut self.epochs.pending);
        let (done, open): (Vec<_>, Vec<_>) = pending.into_iter().partition(|&(_, ep)| ep <= e);
        self.epochs.reported.extend(done.into_iter().map(|(seq, _)| seq));
        self.epochs.pending = open;
        for n in self.live_nodes().collect::<Vec<_>>() {
            let node = &mut self.nodes[n as usize];
            node.store.close_epoch_snapshot(e);
            node.epoch = e + 1;
        }
        for r in std::mem::take(&mut self.epochs.recoveries) {
            self.recover_node(r);
        }
        for n in self.live_nodes().collect::<Vec<_>>() {
            if n == b.manager {
                self.on_barrier(n, e, BarrierPhase::Commit);
            } else {
                self.net.send(b.manager, n, Payload::EpochBarrier { epoch: e, phase: BarrierPhase::Commit });
            }
        }
    }

    /// Pushes primary-side `rts` extensions to the backups of each key.
    /// Fire and forget: nothing waits on it.
    pub(crate) fn ts_sync_flush(&mut self, node: NodeId, items: &[SyncItem]) {
        if items.is_empty() {
            return;
        }
        for (backup, items) in self.group_by_backups(items, |i| i.key) {
            let batch = SyncBatch { items };
            if backup == node {
                batch.apply(&self.nodes[node as usize].store);
            } else {
                self.net.send(node, backup, Payload::TsSync { items: batch.items });
            }
        }
    }

    pub fn fail_node(&mut self, f: NodeId) {
        if !self.nodes[f as usize].alive {
            return;
        }
        self.epochs.failures += 1;
        self.nodes[f as usize].alive = false;
        self.nodes[f as usize].copies_pending.clear();
        self.net.set_failed(f, true);
        self.net.purge_messages();
        self.epochs.barrier = None;
        for n in &mut self.nodes {
            n.paused = false;
            n.acked = false;
            n.pending_acks = 0;
            n.max_ts = LogicalTs::ZERO;
        }
        self.abort_all_running();

        // Commits of the open epoch were never reported; undo them.
        let rolled: BTreeSet<u64> = self.epochs.pending.drain(..).map(|(seq, _)| seq).collect();
        self.metrics.committed -= rolled.len() as u64;
        self.metrics.rolled_back += rolled.len() as u64;
        self.latency_log.retain(|(seq, _)| !rolled.contains(seq));
        self.history.retain(|r| !rolled.contains(&r.seq));
        let closed = self.epochs.closed;
        for n in self.nodes.iter_mut().filter(|n| n.alive) {
            n.store.close_epoch_snapshot(closed);
            n.store.rollback_to_shadow();
        }

        let change = self.placement.remove_node(f);
        let mut lost = change.lost.clone();
        for &(p, np) in &change.promoted {
            if self.nodes[np as usize].copies_pending.contains(&p) {
                lost.push(p);
            }
        }
        if !lost.is_empty() {
            lost.sort_unstable();
            self.error = Some(ClusterError::Unrecoverable { node: f, partitions: lost });
            return;
        }
        let floor = self.epochs.closed_max_ts;
        for (p, np) in change.promoted {
            let store = &mut self.nodes[np as usize].store;
            store.set_role(p, Role::Primary);
            // The old primary may have promised reads up to any committed
            // timestamp; the new one must not accept writes below it.
            store.raise_rts_floor(p, floor);
        }
        self.request_copies();

        if self.cfg.audit_failures {
            let mut replicas = Vec::new();
            for n in self.live_nodes().collect::<Vec<_>>() {
                for p in self.placement.hosted_by(n).collect::<Vec<_>>() {
                    if !self.nodes[n as usize].copies_pending.contains(&p) {
                        replicas.push((n, p, self.nodes[n as usize].store.dump(p)));
                    }
                }
            }
            self.audits.push(FailureAudit {
                at: self.net.now(),
                node: f,
                closed_epoch: closed,
                reported: self.epochs.reported.clone(),
                rolled_back: rolled.into_iter().collect(),
                history_len: self.history.len(),
                replicas,
            });
        }
        self.ensure_ticking();
    }

    /// A failed node rejoins at the next epoch close.
    pub(crate) fn queue_recovery(&mut self, node: NodeId) {
        if self.nodes[node as usize].alive || self.epochs.recoveries.contains(&node) {
            return;
        }
        self.epochs.recoveries.push(node);
        self.ensure_ticking();
    }

    fn recover_node(&mut self, r: NodeId) {
        if self.nodes[r as usize].alive {
            return;
        }
        self.net.set_failed(r, false);
        let parts: Vec<PartitionId> = self.original_placement.hosted_by(r).collect();
        let (closed, current) = (self.epochs.closed, self.epochs.current);
        let load = self.load;
        let n = &mut self.nodes[r as usize];
        n.alive = true;
        n.epoch = current;
        n.paused = false;
        n.acked = false;
        n.pending_acks = 0;
        n.max_ts = LogicalTs::ZERO;
        n.store.close_epoch_snapshot(closed);
        n.store.clear_locks();
        for &p in &parts {
            n.store.ensure_partition(p, Role::Backup, &load);
            n.store.wipe_partition(p);
            n.copies_pending.insert(p);
        }
        // Join the placement first so writes committed after the copy is
        // taken still reach this replica.
        for &p in &parts {
            self.placement.add_backup(p, r);
        }
        self.request_copies();
        if parts.is_empty() {
            self.resume_workers(r);
        }
    }

    /// (Re)sends copy requests for every partition still being recovered.
    fn request_copies(&mut self) {
        for r in self.live_nodes().collect::<Vec<_>>() {
            let pending: Vec<PartitionId> = self.nodes[r as usize].copies_pending.iter().copied().collect();
            for (primary, partitions) in self.group_by_primary(pending, |&p| Key::new(p, 0)) {
                self.net.send(r, primary, Payload::CopyReq { partitions });
            }
        }
    }

    pub(crate) fn on_copy(&mut self, node: NodeId, p: PartitionId, records: &[CopyRecord]) {
        let n = &mut self.nodes[node as usize];
        if !n.copies_pending.remove(&p) {
            return;
        }
        let epoch = n.epoch;
        n.store.install_copy(p, records, epoch);
        if !n.recovering() {
            self.resume_workers(node);
            self.maybe_ack_barrier(node);
        }
    }
}
