//! Nodes, workers and the event loop that drives them.
//!
//! Every node runs a fixed pool of workers. A worker executes one
//! transaction at a time as a coordinator; the node also serves requests
//! from other coordinators as a participant. Requests for records on the
//! coordinator's own node are served in place without messages.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::epoch_replication::{EpochState, FailureAction, FailureAudit, FailureEvent};
use crate::oracle::{History, HistoryRecord};
use crate::scar_engine::{derive_value, AbortReason, Isolation, Outcome, ProtocolToggles, TxnContext};
use crate::storage::{
    Epoch, Key, LoadConfig, LockOutcome, NodeId, NodeStore, PartitionId, PlacementMap, Role, DEFAULT_VALUE_SIZE,
};
use crate::timestamps::{LogicalTs, TxnId};
use crate::transport::{
    micros, millis, Event, LatencyProfile, LockResult, Msg, Network, Payload, ReadLock, SimTime, WriteItem,
};
use crate::workloads::{Generator, Metrics, Op, TxnProgram, WorkloadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Scar,
    /// Distributed Silo-style OCC with physical version validation.
    Occ,
    /// OCC without read validation.
    Rc,
    /// Strict two-phase locking with NO_WAIT and synchronous replication.
    S2pl,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Scar, Protocol::Occ, Protocol::Rc, Protocol::S2pl];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Scar => "scar",
            Protocol::Occ => "occ",
            Protocol::Rc => "rc",
            Protocol::S2pl => "s2pl",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown protocol {s:?} (expected scar, occ, rc or s2pl)"))
    }
}

/// Where a transaction attempt is in its lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Waiting for the timer that runs the next operation.
    Execute,
    /// An operation's remote read or lock is outstanding.
    Read,
    /// All operations ran; validation has not started.
    Begin,
    Lock,
    ValidateReads,
    LockAndValidate,
    ValidateVersions,
    /// Two-phase locking: waiting for synchronous replication acks.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    Worker { node: NodeId, worker: u16, gen: u64 },
    EpochTick,
    Fail(NodeId),
    Recover(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unrecoverable failure of node {node}: partitions {partitions:?} have no live replica")]
    Unrecoverable { node: NodeId, partitions: Vec<PartitionId> },
}

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub protocol: Protocol,
    pub isolation: Isolation,
    pub toggles: ProtocolToggles,
    pub nodes: u16,
    /// Copies of each partition, primary included.
    pub replicas: u16,
    pub workers_per_node: u16,
    pub workload: WorkloadConfig,
    /// Partition count for key-value workloads; TPC-C uses one per warehouse.
    pub partitions: u32,
    pub value_size: usize,
    pub latency: LatencyProfile,
    pub epoch_interval: SimTime,
    /// Local processing time charged per operation.
    pub op_cost: SimTime,
    pub backoff_base: SimTime,
    pub backoff_cap: SimTime,
    pub seed: u64,
    /// Transactions to issue across the cluster; `None` means unbounded.
    pub txn_budget: Option<u64>,
    /// Stop issuing new transactions after this much simulated time.
    pub duration: Option<SimTime>,
    pub failures: Vec<FailureEvent>,
    pub record_history: bool,
    pub fifo: bool,
    /// Capture store dumps at each failure for offline inspection.
    pub audit_failures: bool,
    pub retry_aborts: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            protocol: Protocol::Scar,
            isolation: Isolation::Serializable,
            toggles: ProtocolToggles::ALL,
            nodes: 4,
            replicas: 3,
            workers_per_node: 4,
            workload: WorkloadConfig::Ycsb(crate::workloads::YcsbConfig {
                rows_per_partition: 10_000,
                ..Default::default()
            }),
            partitions: 4,
            value_size: DEFAULT_VALUE_SIZE,
            latency: LatencyProfile::lan(4),
            epoch_interval: millis(10),
            op_cost: micros(1),
            backoff_base: micros(50),
            backoff_cap: millis(2),
            seed: 1,
            txn_budget: Some(50_000),
            duration: None,
            failures: Vec::new(),
            record_history: false,
            fifo: false,
            audit_failures: false,
            retry_aborts: true,
        }
    }
}

impl ClusterConfig {
    pub fn partition_count(&self) -> u32 {
        self.workload.partitions().unwrap_or(self.partitions)
    }

    pub fn load_config(&self) -> LoadConfig {
        LoadConfig {
            partitions: self.partition_count(),
            rows_per_partition: self.workload.rows_per_partition(),
            value_size: self.value_size,
        }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let err = |m: String| Err(ClusterError::Config(m));
        if self.nodes == 0 || self.workers_per_node == 0 {
            return err("need at least one node and one worker per node".into());
        }
        if self.replicas == 0 || self.replicas > self.nodes {
            return err(format!("replicas ({}) must be between 1 and the node count ({})", self.replicas, self.nodes));
        }
        if self.latency.nodes() != self.nodes as usize {
            return err(format!(
                "latency profile covers {} nodes but the cluster has {}",
                self.latency.nodes(),
                self.nodes
            ));
        }
        if self.partition_count() < self.nodes as u32 {
            return err(format!("{} partitions cannot give every one of {} nodes a home", self.partition_count(), self.nodes));
        }
        if self.value_size < 16 {
            return err("value size must be at least 16 bytes".into());
        }
        if self.epoch_interval == 0 {
            return err("epoch interval must be positive".into());
        }
        if self.protocol == Protocol::S2pl && !self.failures.is_empty() {
            return err("failure injection is not supported with s2pl".into());
        }
        if self.protocol != Protocol::Scar && self.isolation == Isolation::SnapshotIsolation {
            return err(format!("{} only runs serializable", self.protocol));
        }
        for f in &self.failures {
            if f.node >= self.nodes {
                return err(format!("failure schedule names node {} of {}", f.node, self.nodes));
            }
        }
        self.workload.validate().map_err(|e| ClusterError::Config(e.to_string()))
    }
}

pub(crate) struct Worker {
    rng: ChaCha8Rng,
    home: PartitionId,
    program: Option<TxnProgram>,
    scripted: bool,
    script: VecDeque<TxnProgram>,
    attempts: u32,
    first_start: SimTime,
    next_seq: u32,
    pub(crate) ctx: Option<TxnContext>,
    pub(crate) gen: u64,
    pub(crate) waiting: bool,
    stopped: bool,
}

pub(crate) struct Node {
    pub(crate) store: NodeStore,
    pub(crate) alive: bool,
    /// Open epoch; commits decided here belong to it.
    pub(crate) epoch: Epoch,
    /// New transactions are held back during an epoch barrier.
    pub(crate) paused: bool,
    pub(crate) acked: bool,
    /// Outstanding acks for writes this node sent as a coordinator.
    pub(crate) pending_acks: u64,
    pub(crate) copies_pending: BTreeSet<PartitionId>,
    /// Largest commit timestamp decided here since the last barrier ack.
    pub(crate) max_ts: LogicalTs,
    pub(crate) workers: Vec<Worker>,
}

impl Node {
    pub(crate) fn quiescent(&self) -> bool {
        self.pending_acks == 0 && self.copies_pending.is_empty() && self.workers.iter().all(|w| w.ctx.is_none())
    }

    pub(crate) fn recovering(&self) -> bool {
        !self.copies_pending.is_empty()
    }
}

pub struct Cluster<N> {
    pub(crate) cfg: ClusterConfig,
    pub(crate) net: N,
    pub(crate) nodes: Vec<Node>,
    pub(crate) placement: PlacementMap,
    pub(crate) original_placement: PlacementMap,
    pub(crate) load: LoadConfig,
    generator: Generator,
    pub(crate) metrics: Metrics,
    pub(crate) epochs: EpochState,
    pub(crate) history: Vec<HistoryRecord>,
    /// (serialization seq, latency) of every commit decision.
    pub(crate) latency_log: Vec<(u64, SimTime)>,
    next_seq: u64,
    issued: u64,
    pub(crate) last_commit: SimTime,
    pub(crate) ticking: bool,
    started: bool,
    pub(crate) error: Option<ClusterError>,
    pub(crate) audits: Vec<FailureAudit>,
    reports: Vec<TxnContext>,
    pub(crate) recover_timers: usize,
}

impl<N: Network<Timer>> Cluster<N> {
    pub fn new(cfg: ClusterConfig, net: N) -> Result<Cluster<N>, ClusterError> {
        cfg.validate()?;
        let load = cfg.load_config();
        let placement = PlacementMap::round_robin(load.partitions, cfg.nodes, cfg.replicas);
        let generator = Generator::new(&cfg.workload, load.partitions);
        let nodes = (0..cfg.nodes)
            .map(|n| {
                let homes: Vec<PartitionId> =
                    (0..load.partitions).filter(|&p| placement.primary(p) == Some(n)).collect();
                let workers = (0..cfg.workers_per_node)
                    .map(|w| Worker {
                        rng: ChaCha8Rng::seed_from_u64(worker_seed(cfg.seed, n, w)),
                        home: homes[w as usize % homes.len()],
                        program: None,
                        scripted: false,
                        script: VecDeque::new(),
                        attempts: 0,
                        first_start: 0,
                        next_seq: 0,
                        ctx: None,
                        gen: 0,
                        waiting: false,
                        stopped: false,
                    })
                    .collect();
                Node {
                    store: NodeStore::load(n, &placement, &load),
                    alive: true,
                    epoch: 1,
                    paused: false,
                    acked: false,
                    pending_acks: 0,
                    copies_pending: BTreeSet::new(),
                    max_ts: LogicalTs::ZERO,
                    workers,
                }
            })
            .collect();
        let recover_timers = cfg.failures.iter().filter(|f| f.action == FailureAction::Recover).count();
        Ok(Cluster {
            epochs: EpochState::new(cfg.epoch_interval),
            cfg,
            net,
            nodes,
            original_placement: placement.clone(),
            placement,
            load,
            generator,
            metrics: Metrics::default(),
            history: Vec::new(),
            latency_log: Vec::new(),
            next_seq: 0,
            issued: 0,
            last_commit: 0,
            ticking: false,
            started: false,
            error: None,
            audits: Vec::new(),
            reports: Vec::new(),
            recover_timers,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn network(&self) -> &N {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut N {
        &mut self.net
    }

    pub fn placement(&self) -> &PlacementMap {
        &self.placement
    }

    pub fn store(&self, node: NodeId) -> &NodeStore {
        &self.nodes[node as usize].store
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.nodes[node as usize].alive
    }

    pub fn epochs(&self) -> &EpochState {
        &self.epochs
    }

    pub fn failure_audits(&self) -> &[FailureAudit] {
        &self.audits
    }

    /// Sets one record on every replica, as if loaded that way.
    pub fn seed_record(&mut self, key: Key, value: &[u8], wts: LogicalTs, rts: LogicalTs) {
        for &n in self.placement.replicas(key.partition) {
            self.nodes[n as usize].store.seed_version(key, value, wts, rts);
        }
    }

    /// Runs until every worker has exhausted its budget and the last epoch
    /// has closed.
    pub fn run(&mut self) -> Result<(), ClusterError> {
        self.start();
        self.drain()
    }

    /// Runs one scripted transaction on worker 0 of `node` to completion
    /// and returns its final context. Aborts are retried only if
    /// `retry_aborts` is set.
    pub fn execute(&mut self, node: NodeId, program: TxnProgram) -> Result<TxnContext, ClusterError> {
        self.submit(node, 0, program);
        self.drain()?;
        Ok(self.reports.pop().expect("scripted transaction did not finish"))
    }

    /// Queues a scripted transaction; scripted programs take precedence over
    /// the generated stream.
    pub fn submit(&mut self, node: NodeId, worker: u16, program: TxnProgram) {
        self.start();
        let now = self.net.now();
        let w = &mut self.nodes[node as usize].workers[worker as usize];
        w.script.push_back(program);
        if w.stopped && w.ctx.is_none() && w.program.is_none() {
            w.stopped = false;
            self.schedule_worker(node, worker, now);
        }
        self.ensure_ticking();
    }

    /// Final contexts of finished scripted transactions, oldest first.
    pub fn take_reports(&mut self) -> Vec<TxnContext> {
        std::mem::take(&mut self.reports)
    }

    pub fn drain(&mut self) -> Result<(), ClusterError> {
        while self.step()? {}
        Ok(())
    }

    /// Handles one event; `false` once nothing is left to do.
    pub fn step(&mut self) -> Result<bool, ClusterError> {
        self.start();
        let Some(ev) = self.net.next_event() else { return Ok(false) };
        self.handle(ev);
        match &self.error {
            Some(e) => Err(e.clone()),
            None => Ok(true),
        }
    }

    fn start(&mut self) {
        if self.started {
            return;
        }
        self.started = true;
        let workers = self.cfg.workers_per_node;
        for n in 0..self.cfg.nodes {
            for w in 0..workers {
                // Stagger starts so workers do not move in lockstep.
                let at = (n as u64 * workers as u64 + w as u64) * 10;
                self.schedule_worker(n, w, at);
            }
        }
        self.ensure_ticking();
        for f in self.cfg.failures.clone() {
            let timer = match f.action {
                FailureAction::Fail => Timer::Fail(f.node),
                FailureAction::Recover => Timer::Recover(f.node),
            };
            self.net.schedule(f.at, timer);
        }
    }

    /// Metrics so far. Latencies exclude transactions later rolled back.
    pub fn metrics(&self) -> Metrics {
        let mut m = self.metrics.clone();
        m.messages = self.net.counters().clone();
        m.elapsed = self.last_commit;
        m.latencies = self.latency_log.iter().map(|&(_, l)| l).collect();
        m
    }

    /// Committed history with the final primary state of every written key.
    pub fn history(&self) -> History {
        let mut final_state = BTreeMap::new();
        for rec in &self.history {
            for w in &rec.writes {
                final_state.entry(w.key).or_insert_with(|| {
                    let r = self.primary_store(w.key).local_read(w.key).expect("primary hosts key");
                    (r.value, r.wts)
                });
            }
        }
        History {
            protocol: self.cfg.protocol,
            value_size: self.cfg.value_size,
            records: self.history.clone(),
            final_state,
        }
    }

    pub fn primary_of(&self, key: Key) -> NodeId {
        self.placement.primary(key.partition).expect("partition has a live primary")
    }

    fn primary_store(&self, key: Key) -> &NodeStore {
        &self.nodes[self.primary_of(key) as usize].store
    }

    /// First replica whose `(value, wts)` dump differs from its primary's.
    pub fn replica_divergence(&self) -> Option<(PartitionId, NodeId)> {
        for p in 0..self.load.partitions {
            let primary = self.primary_of(Key::new(p, 0));
            let reference = self.nodes[primary as usize].store.dump(p);
            for &b in self.placement.backups(p) {
                if self.nodes[b as usize].store.dump(p) != reference {
                    return Some((p, b));
                }
            }
        }
        None
    }

    fn handle(&mut self, ev: Event<Timer>) {
        match ev {
            Event::Deliver(msg) => self.on_message(msg),
            Event::Timer(t) => self.on_timer(t),
            // Only failed nodes time out, and a failure aborts every
            // transaction that could be waiting on them.
            Event::Timeout(_) => {}
        }
    }

    fn on_timer(&mut self, t: Timer) {
        match t {
            Timer::Worker { node, worker, gen } => self.on_worker_timer(node, worker, gen),
            Timer::EpochTick => self.on_epoch_tick(),
            Timer::Fail(n) => self.fail_node(n),
            Timer::Recover(n) => {
                self.recover_timers -= 1;
                self.queue_recovery(n);
            }
        }
    }

    pub(crate) fn schedule_worker(&mut self, node: NodeId, worker: u16, at: SimTime) {
        let gen = self.nodes[node as usize].workers[worker as usize].gen;
        self.net.schedule(at, Timer::Worker { node, worker, gen });
    }

    /// Whether anything still needs the epoch barrier to keep running.
    pub(crate) fn work_remaining(&self) -> bool {
        let busy = self.nodes.iter().any(|n| {
            n.alive && (n.recovering() || n.workers.iter().any(|w| !w.stopped || w.ctx.is_some()))
        });
        busy || !self.epochs.pending.is_empty() || !self.epochs.recoveries.is_empty() || self.recover_timers > 0
    }

    fn may_issue(&self) -> bool {
        self.cfg.txn_budget.is_none_or(|b| self.issued < b) && self.cfg.duration.is_none_or(|d| self.net.now() < d)
    }

    fn on_worker_timer(&mut self, node: NodeId, w: u16, gen: u64) {
        let n = &self.nodes[node as usize];
        if !n.alive || n.workers[w as usize].gen != gen {
            return;
        }
        if n.workers[w as usize].ctx.is_some() {
            self.step_txn(node, w);
        } else {
            self.start_next(node, w);
        }
    }

    fn start_next(&mut self, node: NodeId, w: u16) {
        let now = self.net.now();
        let may_issue = self.may_issue();
        let isolation = self.cfg.isolation;
        let n = &mut self.nodes[node as usize];
        let paused = n.paused || n.recovering();
        let worker = &mut n.workers[w as usize];
        if paused {
            worker.waiting = true;
            return;
        }
        if worker.program.is_none() {
            if let Some(p) = worker.script.pop_front() {
                worker.program = Some(p);
                worker.scripted = true;
            } else if may_issue {
                worker.program = Some(self.generator.next_txn(&mut worker.rng, worker.home));
                worker.scripted = false;
                self.issued += 1;
            } else {
                worker.stopped = true;
                return;
            }
            worker.attempts = 0;
            worker.first_start = now;
        }
        worker.attempts += 1;
        let tid = TxnId::new(node, w, worker.next_seq);
        worker.next_seq = worker.next_seq.wrapping_add(1);
        worker.ctx = Some(TxnContext::new(tid, isolation, worker.first_start));
        self.metrics.attempted += 1;
        self.step_txn(node, w);
    }

    fn current_op(&self, ctx: &TxnContext) -> Option<Op> {
        let w = &self.nodes[ctx.tid.node() as usize].workers[ctx.tid.worker() as usize];
        w.program.as_ref().and_then(|p| p.ops.get(ctx.next_op).copied())
    }

    /// Runs the next operation, or starts validation after the last one.
    fn step_txn(&mut self, node: NodeId, w: u16) {
        let mut ctx = self.nodes[node as usize].workers[w as usize].ctx.take().expect("running transaction");
        match self.current_op(&ctx) {
            Some(op) => self.execute_op(node, &mut ctx, op),
            None => ctx.stage = Stage::Begin,
        }
        self.advance(node, &mut ctx);
        self.settle(node, ctx);
    }

    fn execute_op(&mut self, node: NodeId, ctx: &mut TxnContext, op: Op) {
        ctx.stage = Stage::Read;
        let s2pl = self.cfg.protocol == Protocol::S2pl;
        let size = self.cfg.value_size;
        match op {
            Op::StaticRead(_) => {}
            Op::Read(k) => {
                if ctx.cached_value(k).is_none() {
                    let lock = if s2pl { ReadLock::Shared } else { ReadLock::None };
                    self.issue_read(node, ctx, k, lock);
                }
            }
            Op::Update(k) if s2pl => {
                if ctx.write_entry(k).is_some_and(|e| e.lock_held) {
                } else if ctx.read_entry(k).is_some() {
                    // Upgrade a shared lock.
                    let v = derive_value(ctx.cached_value(k), ctx.tid, size);
                    ctx.txn_write(k, v);
                    ctx.op_written = true;
                    self.issue_write_lock(node, ctx, k);
                } else {
                    self.issue_read(node, ctx, k, ReadLock::Exclusive);
                }
            }
            Op::Update(k) => {
                if ctx.cached_value(k).is_none() {
                    self.issue_read(node, ctx, k, ReadLock::None);
                }
            }
            Op::Write(k) => {
                ctx.txn_write(k, derive_value(None, ctx.tid, size));
                ctx.op_written = true;
                if s2pl && !ctx.write_entry(k).is_some_and(|e| e.lock_held) {
                    self.issue_write_lock(node, ctx, k);
                }
            }
        }
    }

    fn issue_read(&mut self, node: NodeId, ctx: &mut TxnContext, key: Key, lock: ReadLock) {
        let store = &self.nodes[node as usize].store;
        let role = store.role(key.partition);
        let local = match role {
            Some(Role::Primary) => true,
            Some(Role::Backup) => lock == ReadLock::None && self.cfg.toggles.local_read,
            None => false,
        };
        if local {
            let ok = match lock {
                ReadLock::None => true,
                ReadLock::Shared => store.try_lock_shared(key, ctx.tid),
                ReadLock::Exclusive => matches!(store.try_lock(key, None, ctx.tid), LockOutcome::Acquired { .. }),
            };
            let r = store.local_read(key).expect("hosted record");
            self.on_read_result(ctx, key, ok, r.value, r.wts, r.rts, role == Some(Role::Backup));
        } else {
            let primary = self.primary_of(key);
            self.send_for(ctx, node, primary, Payload::ReadReq { txn: ctx.tid, key, lock });
            ctx.pending += 1;
        }
    }

    fn issue_write_lock(&mut self, node: NodeId, ctx: &mut TxnContext, key: Key) {
        let items = vec![crate::transport::LockItem { key, expected: None }];
        ctx.pending += self.issue_locks(node, ctx, items);
    }

    #[allow(clippy::too_many_arguments)]
    fn on_read_result(
        &mut self,
        ctx: &mut TxnContext,
        key: Key,
        ok: bool,
        value: Box<[u8]>,
        wts: LogicalTs,
        rts: LogicalTs,
        from_backup: bool,
    ) {
        if !ok {
            ctx.fail(AbortReason::Busy);
            return;
        }
        if self.cfg.protocol == Protocol::S2pl {
            if self.current_op(ctx) == Some(Op::Update(key)) {
                let v = derive_value(Some(&value), ctx.tid, self.cfg.value_size);
                ctx.record_read(key, value, wts, rts, false);
                ctx.txn_write(key, v);
                ctx.write_set.iter_mut().filter(|e| e.key == key).for_each(|e| e.lock_held = true);
                ctx.op_written = true;
            } else {
                ctx.record_read(key, value, wts, rts, false);
                ctx.shared_locks.push(key);
            }
            return;
        }
        ctx.record_read(key, value, wts, rts, from_backup);
    }

    /// Finishes the current operation and schedules the next.
    fn op_done(&mut self, node: NodeId, ctx: &mut TxnContext) {
        if let Some(Op::Update(k)) = self.current_op(ctx) {
            if !ctx.op_written {
                let v = derive_value(ctx.cached_value(k), ctx.tid, self.cfg.value_size);
                ctx.txn_write(k, v);
            }
        }
        ctx.op_written = false;
        ctx.next_op += 1;
        ctx.stage = Stage::Execute;
        let at = self.net.now() + self.cfg.op_cost;
        self.schedule_worker(node, ctx.tid.worker(), at);
    }

    /// Moves a transaction forward for as long as no request is
    /// outstanding.
    pub(crate) fn advance(&mut self, node: NodeId, ctx: &mut TxnContext) {
        while ctx.outcome == Outcome::Running && ctx.pending == 0 {
            if let Some(reason) = ctx.failure {
                self.abort(node, ctx, reason);
                return;
            }
            match ctx.stage {
                Stage::Execute => return,
                Stage::Read => {
                    self.op_done(node, ctx);
                    return;
                }
                Stage::Begin => match self.cfg.protocol {
                    Protocol::Scar => self.scar_validate(node, ctx),
                    Protocol::Occ | Protocol::Rc => self.occ_validate(node, ctx),
                    Protocol::S2pl => self.s2pl_commit(node, ctx),
                },
                _ => match self.cfg.protocol {
                    Protocol::Scar => self.scar_round_done(node, ctx),
                    Protocol::Occ | Protocol::Rc => self.occ_round_done(node, ctx),
                    Protocol::S2pl => self.s2pl_round_done(node, ctx),
                },
            }
        }
    }

    /// Returns a context to its worker, or retires it.
    fn settle(&mut self, node: NodeId, ctx: TxnContext) {
        let now = self.net.now();
        let w = ctx.tid.worker();
        let retry = self.cfg.retry_aborts;
        let (base, cap, op_cost) = (self.cfg.backoff_base, self.cfg.backoff_cap, self.cfg.op_cost);
        let worker = &mut self.nodes[node as usize].workers[w as usize];
        let at = match ctx.outcome {
            Outcome::Running => {
                worker.ctx = Some(ctx);
                return;
            }
            Outcome::Aborted(_) if retry => {
                let exp = worker.attempts.saturating_sub(1).min(16);
                let window = base.saturating_mul(1 << exp).min(cap).max(1);
                now + window / 2 + worker.rng.gen_range(0..=window / 2)
            }
            _ => {
                worker.program = None;
                if worker.scripted {
                    self.reports.push(ctx);
                }
                now + op_cost
            }
        };
        self.schedule_worker(node, w, at);
        self.maybe_ack_barrier(node);
    }

    pub(crate) fn assign_seq(&mut self, ctx: &mut TxnContext) {
        ctx.seq = Some(self.next_seq);
        self.next_seq += 1;
    }

    pub(crate) fn send_for(&mut self, ctx: &mut TxnContext, src: NodeId, dst: NodeId, payload: Payload) {
        ctx.msgs.record(payload.kind());
        self.net.send(src, dst, payload);
    }

    pub(crate) fn group_by_primary<T>(&self, items: Vec<T>, key: impl Fn(&T) -> Key) -> BTreeMap<NodeId, Vec<T>> {
        let mut out: BTreeMap<NodeId, Vec<T>> = BTreeMap::new();
        for item in items {
            out.entry(self.primary_of(key(&item))).or_default().push(item);
        }
        out
    }

    pub(crate) fn group_by_backups<T: Clone>(&self, items: &[T], key: impl Fn(&T) -> Key) -> BTreeMap<NodeId, Vec<T>> {
        let mut out: BTreeMap<NodeId, Vec<T>> = BTreeMap::new();
        for item in items {
            for &b in self.placement.backups(key(item).partition) {
                out.entry(b).or_default().push(item.clone());
            }
        }
        out
    }

    pub(crate) fn write_items(ctx: &TxnContext) -> Vec<WriteItem> {
        ctx.write_set.iter().map(|e| WriteItem { key: e.key, value: e.value.clone() }).collect()
    }

    /// Ships writes to backups: local ones apply in place. Returns the
    /// number of remote messages.
    pub(crate) fn replicate(&mut self, node: NodeId, ctx: &mut TxnContext, items: &[WriteItem], epoch: Epoch) -> u32 {
        let mut remote = 0;
        for (backup, group) in self.group_by_backups(items, |i| i.key) {
            if backup == node {
                for it in &group {
                    self.nodes[node as usize].store.replica_apply(it.key, &it.value, ctx.cts, epoch);
                }
            } else {
                self.send_for(ctx, node, backup, Payload::ReplicateReq { txn: ctx.tid, epoch, cts: ctx.cts, items: group });
                remote += 1;
            }
        }
        remote
    }

    /// Asynchronous commit shared by the optimistic protocols: install at
    /// the primaries (releasing locks), replicate, and move on without
    /// waiting for acks.
    pub(crate) fn commit(&mut self, node: NodeId, ctx: &mut TxnContext) {
        let epoch = self.nodes[node as usize].epoch;
        ctx.epoch = epoch;
        let items = Self::write_items(ctx);
        let mut remote = 0;
        for (primary, group) in self.group_by_primary(items.clone(), |i| i.key) {
            if primary == node {
                for it in &group {
                    self.nodes[node as usize].store.primary_apply(it.key, &it.value, ctx.cts, epoch, ctx.tid);
                }
            } else {
                let payload =
                    Payload::WriteReq { txn: ctx.tid, epoch, cts: ctx.cts, items: group, release: Vec::new() };
                self.send_for(ctx, node, primary, payload);
                remote += 1;
            }
        }
        remote += self.replicate(node, ctx, &items, epoch);
        self.nodes[node as usize].pending_acks += remote as u64;
        self.finish_commit(node, ctx);
    }

    /// Bookkeeping once a commit is decided and locks are released.
    pub(crate) fn finish_commit(&mut self, node: NodeId, ctx: &mut TxnContext) {
        ctx.outcome = Outcome::Committed;
        if self.cfg.protocol == Protocol::Scar && self.cfg.toggles.ts_sync {
            let items = std::mem::take(&mut ctx.extended);
            self.ts_sync_flush(node, &items);
            ctx.extended = items;
        }
        let now = self.net.now();
        let seq = ctx.seq.expect("committed transaction has a serialization point");
        self.metrics.committed += 1;
        self.latency_log.push((seq, now - ctx.started));
        if self.cfg.protocol == Protocol::Scar && ctx.isolation == Isolation::SnapshotIsolation {
            self.metrics.si_committed += 1;
            if ctx.serializable_flag {
                self.metrics.si_serializable += 1;
            }
        }
        self.metrics.rounds.record(ctx.remote_lock && ctx.remote_validate, ctx.rounds);
        let n = &mut self.nodes[node as usize];
        n.max_ts = n.max_ts.max(ctx.cts);
        self.epochs.pending.push((seq, ctx.epoch));
        if self.cfg.record_history || self.cfg.audit_failures {
            self.history.push(HistoryRecord::from_context(ctx));
        }
        self.last_commit = now;
    }

    pub(crate) fn abort(&mut self, node: NodeId, ctx: &mut TxnContext, reason: AbortReason) {
        ctx.outcome = Outcome::Aborted(reason);
        let mut keys: Vec<Key> = ctx.locked_keys().chain(ctx.shared_locks.iter().copied()).collect();
        keys.sort_unstable();
        keys.dedup();
        for (primary, group) in self.group_by_primary(keys, |k| *k) {
            if primary == node {
                for k in group {
                    self.nodes[node as usize].store.unlock(k, ctx.tid);
                }
            } else {
                self.send_for(ctx, node, primary, Payload::Unlock { txn: ctx.tid, keys: group });
            }
        }
        if self.cfg.protocol == Protocol::Scar && self.cfg.toggles.ts_sync {
            let items = std::mem::take(&mut ctx.extended);
            self.ts_sync_flush(node, &items);
        }
        self.metrics.record_abort(reason);
    }

    fn on_message(&mut self, msg: Msg) {
        let Msg { src, dst, payload, .. } = msg;
        if !self.nodes[dst as usize].alive {
            return;
        }
        let store = &self.nodes[dst as usize].store;
        match payload {
            Payload::ReadReq { txn, key, lock } => {
                let ok = match lock {
                    ReadLock::None => true,
                    ReadLock::Shared => store.try_lock_shared(key, txn),
                    ReadLock::Exclusive => matches!(store.try_lock(key, None, txn), LockOutcome::Acquired { .. }),
                };
                let r = store.local_read(key).expect("read routed to a replica");
                let value = if ok { r.value } else { Box::default() };
                self.net.send(dst, src, Payload::ReadRep { txn, key, ok, value, wts: r.wts, rts: r.rts });
            }
            Payload::LockReq { txn, items } => {
                let items = items
                    .iter()
                    .map(|i| LockResult { key: i.key, outcome: store.try_lock(i.key, i.expected, txn) })
                    .collect();
                self.net.send(dst, src, Payload::LockRep { txn, items });
            }
            Payload::ValidateReq { txn, mode, items } => {
                let items = items.iter().map(|i| self.serve_validation(dst, txn, i, mode)).collect();
                self.net.send(dst, src, Payload::ValidateRep { txn, items });
            }
            Payload::WriteReq { txn, epoch, cts, items, release } => {
                for it in &items {
                    store.primary_apply(it.key, &it.value, cts, epoch, txn);
                }
                for k in release {
                    store.unlock(k, txn);
                }
                self.net.send(dst, src, Payload::ReplicateAck { txn, epoch });
            }
            Payload::ReplicateReq { txn, epoch, cts, items } => {
                for it in &items {
                    store.replica_apply(it.key, &it.value, cts, epoch);
                }
                self.net.send(dst, src, Payload::ReplicateAck { txn, epoch });
            }
            Payload::TsSync { items } => {
                for it in &items {
                    store.update_rts(it.key, it.wts, it.rts);
                }
            }
            Payload::Unlock { txn, keys } => {
                for k in keys {
                    store.unlock(k, txn);
                }
            }
            Payload::EpochBarrier { epoch, phase } => self.on_barrier(dst, epoch, phase),
            Payload::BarrierAck { epoch, max_ts } => self.on_barrier_ack(src, epoch, max_ts),
            Payload::CopyReq { partitions } => {
                for p in partitions {
                    let records = self.nodes[dst as usize].store.copy_partition(p);
                    self.net.send(dst, src, Payload::CopyRep { partition: p, records });
                }
            }
            Payload::CopyRep { partition, records } => self.on_copy(dst, partition, &records),
            reply @ (Payload::ReadRep { .. }
            | Payload::LockRep { .. }
            | Payload::ValidateRep { .. }
            | Payload::ReplicateAck { .. }) => self.on_reply(dst, src, reply),
        }
    }

    fn on_reply(&mut self, node: NodeId, src: NodeId, reply: Payload) {
        let txn = match &reply {
            Payload::ReadRep { txn, .. }
            | Payload::LockRep { txn, .. }
            | Payload::ValidateRep { txn, .. }
            | Payload::ReplicateAck { txn, .. } => *txn,
            _ => unreachable!(),
        };
        let worker = self.nodes[node as usize].workers.get(txn.worker() as usize);
        let waiting = worker
            .and_then(|w| w.ctx.as_ref())
            .is_some_and(|c| c.tid == txn && c.pending > 0 && (c.stage == Stage::Replicate) == matches!(reply, Payload::ReplicateAck { .. }));
        if !waiting {
            if matches!(reply, Payload::ReplicateAck { .. }) {
                let n = &mut self.nodes[node as usize];
                n.pending_acks = n.pending_acks.checked_sub(1).expect("unexpected replication ack");
                self.maybe_ack_barrier(node);
            }
            return;
        }
        let mut ctx = self.nodes[node as usize].workers[txn.worker() as usize].ctx.take().unwrap();
        match reply {
            Payload::ReadRep { key, ok, value, wts, rts, .. } => {
                let from_backup = self.placement.role_of(key.partition, src) == Some(Role::Backup);
                self.on_read_result(&mut ctx, key, ok, value, wts, rts, from_backup);
            }
            Payload::LockRep { items, .. } => items.iter().for_each(|r| ctx.apply_lock_result(r)),
            Payload::ValidateRep { items, .. } => items.iter().for_each(|r| ctx.apply_validate_result(r)),
            _ => {}
        }
        ctx.pending -= 1;
        self.advance(node, &mut ctx);
        self.settle(node, ctx);
    }

    /// Drops every running transaction cluster-wide. Workers on live nodes
    /// retry theirs; workers on dead nodes wait for recovery.
    pub(crate) fn abort_all_running(&mut self) {
        let now = self.net.now();
        for n in 0..self.nodes.len() {
            let alive = self.nodes[n].alive;
            for w in 0..self.nodes[n].workers.len() {
                let worker = &mut self.nodes[n].workers[w];
                worker.gen += 1;
                if worker.ctx.take().is_some() {
                    self.metrics.record_abort(AbortReason::NodeFailure);
                }
                if alive {
                    worker.waiting = false;
                    if !worker.stopped {
                        self.schedule_worker(n as NodeId, w as u16, now);
                    }
                } else {
                    worker.waiting = true;
                }
            }
        }
    }

    /// Reschedules workers that were held back by a barrier or recovery.
    pub(crate) fn resume_workers(&mut self, node: NodeId) {
        let now = self.net.now();
        let n = &self.nodes[node as usize];
        if !n.alive || n.paused || n.recovering() {
            return;
        }
        for w in 0..n.workers.len() {
            let worker = &mut self.nodes[node as usize].workers[w];
            if worker.waiting {
                worker.waiting = false;
                self.schedule_worker(node, w as u16, now);
            }
        }
    }
}

fn worker_seed(seed: u64, node: NodeId, worker: u16) -> u64 {
    seed ^ ((node as u64) << 48) ^ ((worker as u64) << 32) ^ 0x9e37_79b9_7f4a_7c15
}
