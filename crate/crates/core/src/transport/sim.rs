use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Counters, Event, LatencyProfile, Msg, MsgKind, Network, Payload, SimTime};
use crate::storage::NodeId;

struct Queued<T> {
    at: SimTime,
    seq: u64,
    event: Event<T>,
}

impl<T> PartialEq for Queued<T> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<T> Eq for Queued<T> {}

impl<T> PartialOrd for Queued<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Queued<T> {
    // Min-heap on (time, sequence).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub time: SimTime,
    pub seq: u64,
    pub kind: MsgKind,
    pub src: NodeId,
    pub dst: NodeId,
}

pub type Trace = Vec<TraceEntry>;

/// Deterministic discrete-event network.
pub struct SimNetwork<T> {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Queued<T>>,
    profile: LatencyProfile,
    rng: ChaCha8Rng,
    counters: Counters,
    failed: Vec<bool>,
    timeout: SimTime,
    fifo: bool,
    last_delivery: Vec<SimTime>,
    trace: Option<Trace>,
}

impl<T> SimNetwork<T> {
    pub fn new(profile: LatencyProfile, seed: u64) -> SimNetwork<T> {
        let n = profile.nodes();
        SimNetwork {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            profile,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: Counters::default(),
            failed: vec![false; n],
            timeout: super::millis(5),
            fifo: false,
            last_delivery: vec![0; n * n],
            trace: None,
        }
    }

    /// Forces per-link FIFO delivery. Off by default: the protocol must
    /// cope with reordering.
    pub fn with_fifo(mut self, fifo: bool) -> Self {
        self.fifo = fifo;
        self
    }

    pub fn with_timeout(mut self, timeout: SimTime) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn profile(&self) -> &LatencyProfile {
        &self.profile
    }

    pub fn take_trace(&mut self) -> Trace {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    fn push(&mut self, at: SimTime, event: Event<T>) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Queued { at, seq, event });
    }

    /// Delivery time for a message sent now on `src -> dst`.
    fn delivery_time(&mut self, src: NodeId, dst: NodeId) -> SimTime {
        let mut at = self.now + self.profile.one_way(src, dst);
        if self.profile.jitter > 0 {
            at += self.rng.gen_range(0..=self.profile.jitter);
        }
        if self.fifo {
            let link = src as usize * self.profile.nodes() + dst as usize;
            at = at.max(self.last_delivery[link]);
            self.last_delivery[link] = at;
        }
        at
    }

    /// Pops events in order until none remain, handing each to `handle`.
    /// Returns the trace of deliveries made during the call.
    pub fn run_until_quiescent<F>(&mut self, mut handle: F) -> Trace
    where
        F: FnMut(&mut Self, Event<T>),
    {
        let was_tracing = self.trace.is_some();
        if !was_tracing {
            self.trace = Some(Vec::new());
        }
        while let Some(ev) = self.next_event() {
            handle(self, ev);
        }
        let trace = self.take_trace();
        if !was_tracing {
            self.trace = None;
        }
        trace
    }
}

impl<T> Network<T> for SimNetwork<T> {
    fn now(&self) -> SimTime {
        self.now
    }

    fn send(&mut self, src: NodeId, dst: NodeId, payload: Payload) {
        self.counters.record(payload.kind());
        let at = self.delivery_time(src, dst);
        let msg = Msg { src, dst, send_time: self.now, deliver_time: at, payload };
        if self.failed[dst as usize] {
            let at = self.now + self.timeout;
            self.push(at, Event::Timeout(msg));
        } else {
            self.push(at, Event::Deliver(msg));
        }
    }

    fn schedule(&mut self, at: SimTime, timer: T) {
        self.push(at.max(self.now), Event::Timer(timer));
    }

    fn next_event(&mut self) -> Option<Event<T>> {
        loop {
            let q = self.queue.pop()?;
            debug_assert!(q.at >= self.now);
            self.now = q.at;
            if let Event::Deliver(msg) = &q.event {
                // Delivered-to-dead messages vanish.
                if self.failed[msg.dst as usize] || self.failed[msg.src as usize] {
                    continue;
                }
                if let Some(trace) = &mut self.trace {
                    trace.push(TraceEntry { time: q.at, seq: q.seq, kind: msg.kind(), src: msg.src, dst: msg.dst });
                }
            }
            return Some(q.event);
        }
    }

    fn purge_messages(&mut self) {
        let queue = std::mem::take(&mut self.queue);
        self.queue = queue.into_iter().filter(|q| matches!(q.event, Event::Timer(_))).collect();
    }

    fn set_failed(&mut self, node: NodeId, failed: bool) {
        self.failed[node as usize] = failed;
    }

    fn counters(&self) -> &Counters {
        &self.counters
    }

    fn reset_counters(&mut self) {
        self.counters.reset();
    }
}
