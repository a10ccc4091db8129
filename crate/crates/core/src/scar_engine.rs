//! The SCAR transaction lifecycle.
//!
//! Execution buffers writes and records every first read with the
//! `[wts, rts]` it observed, possibly from a backup replica. Validation
//! picks a commit timestamp instead of checking physical versions:
//!
//! 1. lock the write set at the primaries (NO_WAIT), refreshing each
//!    entry's `rts`;
//! 2. `cts = max(max read wts, max write rts + 1)`;
//! 3. every read whose observed `rts >= cts` is already valid; the rest ask
//!    their primary to extend `rts` to `cts`.
//!
//! Snapshot isolation validates reads at `crts = max read wts` instead, which
//! lets the lock and read-validation rounds run in parallel.

use std::fmt;

use crate::cluster::{Cluster, Stage, Timer};
use crate::storage::{ExtendOutcome, Key, LockOutcome, NodeId};
use crate::timestamps::{compute_crts, compute_cts, LogicalTs, TsView, TxnId};
use crate::transport::{
    LockItem, LockResult, Network, Payload, SimTime, SyncItem, ValidateItem, ValidateMode, ValidateResult,
    ValidateStatus,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Isolation {
    Serializable,
    SnapshotIsolation,
}

impl Isolation {
    pub fn short(self) -> &'static str {
        match self {
            Isolation::Serializable => "SR",
            Isolation::SnapshotIsolation => "SI",
        }
    }
}

impl fmt::Display for Isolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl std::str::FromStr for Isolation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sr" | "serializable" => Ok(Isolation::Serializable),
            "si" | "snapshot" => Ok(Isolation::SnapshotIsolation),
            other => Err(format!("unknown isolation level {other:?}")),
        }
    }
}

/// Coordination-reduction techniques that can be switched off one by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolToggles {
    /// Serve reads from a local backup replica.
    pub local_read: bool,
    /// Skip read validation when the observed `rts` already covers the
    /// commit timestamp.
    pub local_validation: bool,
    /// Push extended `rts` values to backups after each transaction.
    pub ts_sync: bool,
    /// Lock and validate in one round under snapshot isolation.
    pub plv: bool,
}

impl ProtocolToggles {
    pub const ALL: ProtocolToggles = ProtocolToggles { local_read: true, local_validation: true, ts_sync: true, plv: true };
    pub const NONE: ProtocolToggles =
        ProtocolToggles { local_read: false, local_validation: false, ts_sync: false, plv: false };
}

impl Default for ProtocolToggles {
    fn default() -> Self {
        ProtocolToggles::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AbortReason {
    /// A lock was held by another transaction.
    Busy,
    /// A record changed after it was read.
    Stale,
    /// Read validation hit a record locked by another writer.
    Blocked,
    /// A node failed while the transaction ran or before its epoch closed.
    NodeFailure,
}

impl AbortReason {
    pub const ALL: [AbortReason; 4] =
        [AbortReason::Busy, AbortReason::Stale, AbortReason::Blocked, AbortReason::NodeFailure];

    pub fn name(self) -> &'static str {
        match self {
            AbortReason::Busy => "busy",
            AbortReason::Stale => "stale",
            AbortReason::Blocked => "blocked",
            AbortReason::NodeFailure => "node_failure",
        }
    }
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Running,
    Aborted(AbortReason),
    Committed,
}

/// Transaction-local copy of one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RwSetEntry {
    pub key: Key,
    pub value: Box<[u8]>,
    pub wts: LogicalTs,
    pub rts: LogicalTs,
    pub is_write: bool,
    pub lock_held: bool,
    pub validated_locally: bool,
    /// Read served by a backup replica.
    pub from_backup: bool,
    /// Write entry whose timestamps were copied from a prior read.
    pub read_first: bool,
}

impl RwSetEntry {
    fn read(key: Key, value: Box<[u8]>, wts: LogicalTs, rts: LogicalTs, from_backup: bool) -> RwSetEntry {
        RwSetEntry {
            key,
            value,
            wts,
            rts,
            is_write: false,
            lock_held: false,
            validated_locally: false,
            from_backup,
            read_first: false,
        }
    }
}

impl TsView for RwSetEntry {
    fn wts(&self) -> LogicalTs {
        self.wts
    }
    fn rts(&self) -> LogicalTs {
        self.rts
    }
}

/// One transaction attempt, owned by the worker running it.
#[derive(Debug, Clone)]
pub struct TxnContext {
    pub tid: TxnId,
    pub isolation: Isolation,
    pub epoch: u64,
    pub read_set: Vec<RwSetEntry>,
    pub write_set: Vec<RwSetEntry>,
    pub cts: LogicalTs,
    pub crts: LogicalTs,
    pub outcome: Outcome,
    pub serializable_flag: bool,
    /// Position in the serialization order, fixed once the write set is
    /// locked.
    pub seq: Option<u64>,
    /// Messages sent on behalf of this attempt, by kind.
    pub msgs: crate::transport::Counters,
    /// Validation phases that needed at least one remote request.
    pub rounds: u32,
    pub remote_lock: bool,
    pub remote_validate: bool,
    /// Primary-side `rts` extensions to propagate to backups.
    pub extended: Vec<SyncItem>,
    /// Shared locks held under two-phase locking.
    pub shared_locks: Vec<Key>,
    pub next_op: usize,
    pub started: SimTime,
    pub(crate) stage: Stage,
    pub(crate) pending: u32,
    pub(crate) failure: Option<AbortReason>,
    /// The current operation already buffered its write.
    pub(crate) op_written: bool,
}

impl TxnContext {
    pub fn new(tid: TxnId, isolation: Isolation, started: SimTime) -> TxnContext {
        TxnContext {
            tid,
            isolation,
            epoch: 0,
            read_set: Vec::new(),
            write_set: Vec::new(),
            cts: LogicalTs::ZERO,
            crts: LogicalTs::ZERO,
            outcome: Outcome::Running,
            serializable_flag: false,
            seq: None,
            msgs: Default::default(),
            rounds: 0,
            remote_lock: false,
            remote_validate: false,
            extended: Vec::new(),
            shared_locks: Vec::new(),
            next_op: 0,
            started,
            stage: Stage::Execute,
            pending: 0,
            failure: None,
            op_written: false,
        }
    }

    pub fn read_entry(&self, key: Key) -> Option<&RwSetEntry> {
        self.read_set.iter().find(|e| e.key == key)
    }

    pub fn write_entry(&self, key: Key) -> Option<&RwSetEntry> {
        self.write_set.iter().find(|e| e.key == key)
    }

    /// Read-your-writes, then repeatable reads.
    pub fn cached_value(&self, key: Key) -> Option<&[u8]> {
        self.write_entry(key).or_else(|| self.read_entry(key)).map(|e| &e.value[..])
    }

    pub fn record_read(&mut self, key: Key, value: Box<[u8]>, wts: LogicalTs, rts: LogicalTs, from_backup: bool) {
        debug_assert!(self.read_entry(key).is_none());
        self.read_set.push(RwSetEntry::read(key, value, wts, rts, from_backup));
    }

    /// Buffers a write. A write after a read inherits the read's timestamps.
    pub fn txn_write(&mut self, key: Key, value: Box<[u8]>) {
        if let Some(e) = self.write_set.iter_mut().find(|e| e.key == key) {
            e.value = value;
            return;
        }
        let (wts, rts, read_first) = match self.read_entry(key) {
            Some(r) => (r.wts, r.rts, true),
            None => (LogicalTs::ZERO, LogicalTs::ZERO, false),
        };
        self.write_set.push(RwSetEntry {
            key,
            value,
            wts,
            rts,
            is_write: true,
            lock_held: false,
            validated_locally: false,
            from_backup: false,
            read_first,
        });
    }

    /// Lock requests for the write set: a prior read pins the version that
    /// must still be current.
    pub fn lock_items(&self) -> Vec<LockItem> {
        self.write_set
            .iter()
            .filter(|e| !e.lock_held)
            .map(|e| LockItem { key: e.key, expected: e.read_first.then_some(e.wts) })
            .collect()
    }

    pub fn apply_lock_result(&mut self, r: &LockResult) {
        let Some(e) = self.write_set.iter_mut().find(|e| e.key == r.key) else { return };
        match r.outcome {
            LockOutcome::Acquired { wts, rts } => {
                e.lock_held = true;
                e.wts = wts;
                e.rts = rts;
            }
            LockOutcome::Busy => self.fail(AbortReason::Busy),
            LockOutcome::Stale { .. } => self.fail(AbortReason::Stale),
        }
    }

    pub fn fail(&mut self, reason: AbortReason) {
        self.failure.get_or_insert(reason);
    }

    pub fn compute_cts(&self) -> LogicalTs {
        compute_cts(&self.read_set, &self.write_set)
    }

    pub fn compute_crts(&self) -> LogicalTs {
        compute_crts(&self.read_set)
    }

    /// Reads that still need validation at `target`. Entries also in the
    /// write set were pinned by their lock. With local validation, a read
    /// whose observed `rts` covers `target` is valid as is.
    pub fn reads_to_validate(&mut self, target: LogicalTs, local_validation: bool) -> Vec<ValidateItem> {
        let mut out = Vec::new();
        for i in 0..self.read_set.len() {
            let key = self.read_set[i].key;
            if self.write_entry(key).is_some() {
                continue;
            }
            let e = &mut self.read_set[i];
            if local_validation && e.rts >= target {
                e.validated_locally = true;
            } else {
                out.push(ValidateItem { key, wts: e.wts, target });
            }
        }
        out
    }

    pub fn apply_validate_result(&mut self, r: &ValidateResult) {
        match r.status {
            ValidateStatus::Ok => {
                if let Some(e) = self.read_set.iter().find(|e| e.key == r.key) {
                    if r.rts > e.rts {
                        self.extended.push(SyncItem { key: r.key, wts: r.wts, rts: r.rts });
                    }
                }
            }
            ValidateStatus::Stale => self.fail(AbortReason::Stale),
            ValidateStatus::Blocked => self.fail(AbortReason::Blocked),
        }
    }

    pub fn locked_keys(&self) -> impl Iterator<Item = Key> + '_ {
        self.write_set.iter().filter(|e| e.lock_held).map(|e| e.key)
    }
}

/// Value written by `tid`: a read-modify-write bumps a counter in the old
/// value and stamps the writer; a blind write stamps the writer everywhere.
pub fn derive_value(old: Option<&[u8]>, tid: TxnId, size: usize) -> Box<[u8]> {
    let stamp = tid.0.to_le_bytes();
    match old {
        Some(old) => {
            let mut v = old.to_vec();
            if v.len() >= 8 {
                let n = u64::from_le_bytes(v[..8].try_into().unwrap()).wrapping_add(1);
                v[..8].copy_from_slice(&n.to_le_bytes());
            }
            for (dst, src) in v.iter_mut().skip(8).zip(stamp) {
                *dst = src;
            }
            v.into_boxed_slice()
        }
        None => (0..size).map(|i| stamp[i % 8]).collect(),
    }
}

pub(crate) fn extend_status(outcome: ExtendOutcome, key: Key) -> ValidateResult {
    match outcome {
        ExtendOutcome::Extended { wts, rts } => ValidateResult { key, status: ValidateStatus::Ok, wts, rts },
        ExtendOutcome::Stale { wts } => ValidateResult { key, status: ValidateStatus::Stale, wts, rts: wts },
        ExtendOutcome::Blocked => {
            ValidateResult { key, status: ValidateStatus::Blocked, wts: LogicalTs::ZERO, rts: LogicalTs::ZERO }
        }
    }
}

impl<N: Network<Timer>> Cluster<N> {
    /// Starts validation once every operation has executed.
    pub(crate) fn scar_validate(&mut self, node: NodeId, ctx: &mut TxnContext) {
        let empty_ws = ctx.write_set.is_empty();
        match ctx.isolation {
            Isolation::Serializable => {
                if empty_ws {
                    self.assign_seq(ctx);
                    let cts = ctx.compute_cts();
                    ctx.cts = cts;
                    ctx.crts = cts;
                    self.validate_reads(node, ctx, cts, Stage::ValidateReads);
                } else {
                    self.lock_write_set(node, ctx, Stage::Lock);
                }
            }
            Isolation::SnapshotIsolation => {
                ctx.crts = ctx.compute_crts();
                if empty_ws {
                    self.assign_seq(ctx);
                    let crts = ctx.crts;
                    self.validate_reads(node, ctx, crts, Stage::ValidateReads);
                } else if self.cfg.toggles.plv {
                    self.lock_and_validate(node, ctx);
                } else {
                    self.lock_write_set(node, ctx, Stage::Lock);
                }
            }
        }
    }

    /// Continues after a validation round has fully answered.
    pub(crate) fn scar_round_done(&mut self, node: NodeId, ctx: &mut TxnContext) {
        match (ctx.stage, ctx.isolation) {
            (Stage::Lock, Isolation::Serializable) => {
                self.assign_seq(ctx);
                let cts = ctx.compute_cts();
                ctx.cts = cts;
                ctx.crts = cts;
                self.validate_reads(node, ctx, cts, Stage::ValidateReads);
            }
            (Stage::Lock, Isolation::SnapshotIsolation) => {
                self.assign_seq(ctx);
                let crts = ctx.crts;
                self.validate_reads(node, ctx, crts, Stage::ValidateReads);
            }
            (Stage::ValidateReads | Stage::LockAndValidate, _) => {
                if ctx.seq.is_none() {
                    self.assign_seq(ctx);
                }
                if ctx.isolation == Isolation::SnapshotIsolation {
                    ctx.cts = ctx.compute_cts();
                }
                ctx.serializable_flag = ctx.crts == ctx.cts;
                self.commit(node, ctx);
            }
            (stage, _) => unreachable!("round completed in stage {stage:?}"),
        }
    }

    /// Step 1: lock the write set, one request per primary node.
    pub(crate) fn lock_write_set(&mut self, node: NodeId, ctx: &mut TxnContext, stage: Stage) {
        ctx.stage = stage;
        let items = ctx.lock_items();
        let remote = self.issue_locks(node, ctx, items);
        ctx.remote_lock |= remote > 0;
        if remote > 0 {
            ctx.rounds += 1;
        }
        ctx.pending += remote;
    }

    /// Read validation at `target`, one request per primary node.
    pub(crate) fn validate_reads(&mut self, node: NodeId, ctx: &mut TxnContext, target: LogicalTs, stage: Stage) {
        ctx.stage = stage;
        let items = ctx.reads_to_validate(target, self.cfg.toggles.local_validation);
        self.count_backup_validation(ctx);
        let remote = self.issue_validation(node, ctx, items, ValidateMode::Extend);
        ctx.remote_validate |= remote > 0;
        if remote > 0 {
            ctx.rounds += 1;
        }
        ctx.pending += remote;
    }

    /// Snapshot isolation: lock the write set and validate reads at `crts`
    /// in the same round.
    fn lock_and_validate(&mut self, node: NodeId, ctx: &mut TxnContext) {
        ctx.stage = Stage::LockAndValidate;
        let locks = ctx.lock_items();
        let crts = ctx.crts;
        let reads = ctx.reads_to_validate(crts, self.cfg.toggles.local_validation);
        self.count_backup_validation(ctx);
        let remote_locks = self.issue_locks(node, ctx, locks);
        let remote_reads = self.issue_validation(node, ctx, reads, ValidateMode::Extend);
        ctx.remote_lock |= remote_locks > 0;
        ctx.remote_validate |= remote_reads > 0;
        if remote_locks + remote_reads > 0 {
            ctx.rounds += 1;
        }
        ctx.pending += remote_locks + remote_reads;
    }

    fn count_backup_validation(&mut self, ctx: &TxnContext) {
        for e in ctx.read_set.iter().filter(|e| e.from_backup && ctx.write_entry(e.key).is_none()) {
            self.metrics.backup_reads_checked += 1;
            if e.validated_locally {
                self.metrics.backup_reads_local += 1;
            }
        }
    }

    /// Sends lock requests grouped by primary; local ones are served in
    /// place. Returns the number of remote requests.
    pub(crate) fn issue_locks(&mut self, node: NodeId, ctx: &mut TxnContext, items: Vec<LockItem>) -> u32 {
        let mut remote = 0;
        for (primary, group) in self.group_by_primary(items, |i| i.key) {
            if primary == node {
                for item in group {
                    let outcome = self.nodes[node as usize].store.try_lock(item.key, item.expected, ctx.tid);
                    ctx.apply_lock_result(&LockResult { key: item.key, outcome });
                }
            } else {
                self.send_for(ctx, node, primary, Payload::LockReq { txn: ctx.tid, items: group });
                remote += 1;
            }
        }
        remote
    }

    pub(crate) fn issue_validation(
        &mut self,
        node: NodeId,
        ctx: &mut TxnContext,
        items: Vec<ValidateItem>,
        mode: ValidateMode,
    ) -> u32 {
        let mut remote = 0;
        for (primary, group) in self.group_by_primary(items, |i| i.key) {
            if primary == node {
                for item in group {
                    let r = self.serve_validation(node, ctx.tid, &item, mode);
                    ctx.apply_validate_result(&r);
                }
            } else {
                self.send_for(ctx, node, primary, Payload::ValidateReq { txn: ctx.tid, mode, items: group });
                remote += 1;
            }
        }
        remote
    }

    pub(crate) fn serve_validation(&self, node: NodeId, txn: TxnId, item: &ValidateItem, mode: ValidateMode) -> ValidateResult {
        let store = &self.nodes[node as usize].store;
        match mode {
            ValidateMode::Extend => extend_status(store.extend_rts(item.key, item.wts, item.target, txn), item.key),
            ValidateMode::Version => {
                use crate::storage::VersionCheck;
                let status = match store.check_version(item.key, item.wts, txn) {
                    VersionCheck::Unchanged => ValidateStatus::Ok,
                    VersionCheck::Changed => ValidateStatus::Stale,
                    VersionCheck::Locked => ValidateStatus::Blocked,
                };
                ValidateResult { key: item.key, status, wts: item.wts, rts: item.wts }
            }
        }
    }
}
