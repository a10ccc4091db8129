//! Typed messages between nodes and the networks that carry them.
//!
//! [`SimNetwork`] is a seeded discrete-event scheduler: every message gets a
//! delivery time from the latency profile and events fire in
//! `(time, sequence)` order, so a run is a pure function of its seed.
//! [`SocketNetwork`] pushes the same binary frames over loopback TCP.

pub mod codec;
mod latency;
mod sim;
mod socket;

pub use latency::{LatencyProfile, ProfileError};
pub use sim::{SimNetwork, Trace, TraceEntry};
pub use socket::SocketNetwork;

use std::fmt;

use crate::storage::{CopyRecord, Epoch, Key, LockOutcome, NodeId, PartitionId};
use crate::timestamps::{LogicalTs, TxnId};

/// Simulated (or wall-clock, in socket mode) time in nanoseconds.
pub type SimTime = u64;

pub const fn micros(us: u64) -> SimTime {
    us * 1_000
}

pub const fn millis(ms: u64) -> SimTime {
    ms * 1_000_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgKind {
    ReadReq = 0,
    ReadRep = 1,
    LockReq = 2,
    LockRep = 3,
    ValidateReq = 4,
    ValidateRep = 5,
    WriteReq = 6,
    ReplicateReq = 7,
    ReplicateAck = 8,
    TsSync = 9,
    Unlock = 10,
    EpochBarrier = 11,
    BarrierAck = 12,
    CopyReq = 13,
    CopyRep = 14,
}

impl MsgKind {
    pub const COUNT: usize = 15;

    pub const ALL: [MsgKind; MsgKind::COUNT] = [
        MsgKind::ReadReq,
        MsgKind::ReadRep,
        MsgKind::LockReq,
        MsgKind::LockRep,
        MsgKind::ValidateReq,
        MsgKind::ValidateRep,
        MsgKind::WriteReq,
        MsgKind::ReplicateReq,
        MsgKind::ReplicateAck,
        MsgKind::TsSync,
        MsgKind::Unlock,
        MsgKind::EpochBarrier,
        MsgKind::BarrierAck,
        MsgKind::CopyReq,
        MsgKind::CopyRep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::ReadReq => "read_req",
            MsgKind::ReadRep => "read_rep",
            MsgKind::LockReq => "lock_req",
            MsgKind::LockRep => "lock_rep",
            MsgKind::ValidateReq => "validate_req",
            MsgKind::ValidateRep => "validate_rep",
            MsgKind::WriteReq => "write_req",
            MsgKind::ReplicateReq => "replicate_req",
            MsgKind::ReplicateAck => "replicate_ack",
            MsgKind::TsSync => "ts_sync",
            MsgKind::Unlock => "unlock",
            MsgKind::EpochBarrier => "epoch_barrier",
            MsgKind::BarrierAck => "barrier_ack",
            MsgKind::CopyReq => "copy_req",
            MsgKind::CopyRep => "copy_rep",
        }
    }

    pub fn from_u8(b: u8) -> Option<MsgKind> {
        MsgKind::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadLock {
    None,
    Shared,
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidateMode {
    /// Extend `rts` to the target timestamp.
    Extend,
    /// Compare versions only.
    Version,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidateStatus {
    Ok,
    Stale,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierPhase {
    /// Stop starting transactions and drain; ack when quiescent.
    Prepare,
    /// The epoch closed; resume.
    Commit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockItem {
    pub key: Key,
    pub expected: Option<LogicalTs>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockResult {
    pub key: Key,
    pub outcome: LockOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidateItem {
    pub key: Key,
    pub wts: LogicalTs,
    pub target: LogicalTs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidateResult {
    pub key: Key,
    pub status: ValidateStatus,
    pub wts: LogicalTs,
    pub rts: LogicalTs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteItem {
    pub key: Key,
    pub value: Box<[u8]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncItem {
    pub key: Key,
    pub wts: LogicalTs,
    pub rts: LogicalTs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    ReadReq { txn: TxnId, key: Key, lock: ReadLock },
    ReadRep { txn: TxnId, key: Key, ok: bool, value: Box<[u8]>, wts: LogicalTs, rts: LogicalTs },
    LockReq { txn: TxnId, items: Vec<LockItem> },
    LockRep { txn: TxnId, items: Vec<LockResult> },
    ValidateReq { txn: TxnId, mode: ValidateMode, items: Vec<ValidateItem> },
    ValidateRep { txn: TxnId, items: Vec<ValidateResult> },
    /// Apply at the primary and release locks; `release` lists extra keys
    /// (shared locks) to drop at the same time.
    WriteReq { txn: TxnId, epoch: Epoch, cts: LogicalTs, items: Vec<WriteItem>, release: Vec<Key> },
    ReplicateReq { txn: TxnId, epoch: Epoch, cts: LogicalTs, items: Vec<WriteItem> },
    /// Acknowledges a `WriteReq` or `ReplicateReq`.
    ReplicateAck { txn: TxnId, epoch: Epoch },
    TsSync { items: Vec<SyncItem> },
    Unlock { txn: TxnId, keys: Vec<Key> },
    EpochBarrier { epoch: Epoch, phase: BarrierPhase },
    BarrierAck { epoch: Epoch, max_ts: LogicalTs },
    CopyReq { partitions: Vec<PartitionId> },
    CopyRep { partition: PartitionId, records: Vec<CopyRecord> },
}

impl Payload {
    pub fn kind(&self) -> MsgKind {
        match self {
            Payload::ReadReq { .. } => MsgKind::ReadReq,
            Payload::ReadRep { .. } => MsgKind::ReadRep,
            Payload::LockReq { .. } => MsgKind::LockReq,
            Payload::LockRep { .. } => MsgKind::LockRep,
            Payload::ValidateReq { .. } => MsgKind::ValidateReq,
            Payload::ValidateRep { .. } => MsgKind::ValidateRep,
            Payload::WriteReq { .. } => MsgKind::WriteReq,
            Payload::ReplicateReq { .. } => MsgKind::ReplicateReq,
            Payload::ReplicateAck { .. } => MsgKind::ReplicateAck,
            Payload::TsSync { .. } => MsgKind::TsSync,
            Payload::Unlock { .. } => MsgKind::Unlock,
            Payload::EpochBarrier { .. } => MsgKind::EpochBarrier,
            Payload::BarrierAck { .. } => MsgKind::BarrierAck,
            Payload::CopyReq { .. } => MsgKind::CopyReq,
            Payload::CopyRep { .. } => MsgKind::CopyRep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Msg {
    pub src: NodeId,
    pub dst: NodeId,
    pub send_time: SimTime,
    pub deliver_time: SimTime,
    pub payload: Payload,
}

impl Msg {
    pub fn kind(&self) -> MsgKind {
        self.payload.kind()
    }
}

/// Monotone per-kind send counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    counts: [u64; MsgKind::COUNT],
}

impl Counters {
    pub fn record(&mut self, kind: MsgKind) {
        self.counts[kind as usize] += 1;
    }

    pub fn get(&self, kind: MsgKind) -> u64 {
        self.counts[kind as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts = [0; MsgKind::COUNT];
    }

    /// Non-zero counters in kind order.
    pub fn iter(&self) -> impl Iterator<Item = (MsgKind, u64)> + '_ {
        MsgKind::ALL.iter().map(|&k| (k, self.get(k))).filter(|(_, c)| *c > 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event<T> {
    Deliver(Msg),
    Timer(T),
    /// A message addressed to a failed node, returned to its sender after
    /// the configured timeout.
    Timeout(Msg),
}

/// What the cluster needs from a network: sending, timers and the clock.
pub trait Network<T> {
    fn now(&self) -> SimTime;
    fn send(&mut self, src: NodeId, dst: NodeId, payload: Payload);
    fn schedule(&mut self, at: SimTime, timer: T);
    fn next_event(&mut self) -> Option<Event<T>>;
    /// Drops every in-flight message; timers survive.
    fn purge_messages(&mut self);
    fn set_failed(&mut self, node: NodeId, failed: bool);
    fn counters(&self) -> &Counters;
    fn reset_counters(&mut self);
}
