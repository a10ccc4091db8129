//! Logical timestamps and per-record timestamp metadata.
//!
//! Every record carries a `[wts, rts]` pair. A record version written at
//! `wts` may be read at any logical time `ts` with `wts <= ts <= rts`; the
//! primary promises not to overwrite the record at or below `rts`.

use std::fmt;

/// A point in logical time. Records are loaded at `LogicalTs::ZERO`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LogicalTs(pub u64);

impl LogicalTs {
    pub const ZERO: LogicalTs = LogicalTs(0);

    pub fn get(self) -> u64 {
        self.0
    }

    /// The smallest timestamp strictly after `self`.
    pub fn successor(self) -> LogicalTs {
        LogicalTs(self.0 + 1)
    }
}

impl fmt::Display for LogicalTs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for LogicalTs {
    fn from(v: u64) -> Self {
        LogicalTs(v)
    }
}

/// Unique transaction attempt identifier: coordinating node, worker slot on
/// that node and a per-worker sequence number, packed into 64 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxnId(pub u64);

impl TxnId {
    pub fn new(node: u16, worker: u16, seq: u32) -> TxnId {
        TxnId(((node as u64) << 48) | ((worker as u64) << 32) | seq as u64)
    }

    pub fn node(self) -> u16 {
        (self.0 >> 48) as u16
    }

    pub fn worker(self) -> u16 {
        (self.0 >> 32) as u16
    }

    pub fn seq(self) -> u32 {
        self.0 as u32
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}.w{}.{}", self.node(), self.worker(), self.seq())
    }
}

/// Timestamp metadata of one record replica.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TsMeta {
    pub wts: LogicalTs,
    pub rts: LogicalTs,
    /// Holder of the exclusive (write) lock, if any.
    pub lock_owner: Option<TxnId>,
}

/// A consistent `(wts, rts, locked)` triple read under the record latch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetaSnapshot {
    pub wts: LogicalTs,
    pub rts: LogicalTs,
    pub locked: bool,
}

impl TsMeta {
    pub fn new(wts: LogicalTs, rts: LogicalTs) -> TsMeta {
        debug_assert!(wts <= rts);
        TsMeta { wts, rts, lock_owner: None }
    }

    pub fn locked(&self) -> bool {
        self.lock_owner.is_some()
    }

    pub fn locked_by_other(&self, txn: TxnId) -> bool {
        matches!(self.lock_owner, Some(owner) if owner != txn)
    }

    pub fn snapshot(&self) -> MetaSnapshot {
        MetaSnapshot { wts: self.wts, rts: self.rts, locked: self.locked() }
    }

    /// Whether a read of this version is valid at logical time `ts`.
    pub fn valid_at(&self, ts: LogicalTs) -> bool {
        self.wts <= ts && ts <= self.rts
    }
}

/// Commit timestamps of a transaction. Under serializability `crts == cts`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommitStamp {
    pub cts: LogicalTs,
    pub crts: LogicalTs,
}

impl CommitStamp {
    /// A snapshot-isolation transaction whose reads and writes happen at the
    /// same logical time is serializable at that time.
    pub fn is_serializable(&self) -> bool {
        self.crts == self.cts
    }
}

/// Anything that carries an observed `[wts, rts]` pair.
pub trait TsView {
    fn wts(&self) -> LogicalTs;
    fn rts(&self) -> LogicalTs;
}

impl TsView for (LogicalTs, LogicalTs) {
    fn wts(&self) -> LogicalTs {
        self.0
    }
    fn rts(&self) -> LogicalTs {
        self.1
    }
}

impl TsView for TsMeta {
    fn wts(&self) -> LogicalTs {
        self.wts
    }
    fn rts(&self) -> LogicalTs {
        self.rts
    }
}

/// Smallest commit timestamp that is `>=` every read `wts` and `>` every
/// write `rts`. Write entries must carry the `rts` refreshed when locked.
pub fn compute_cts<R: TsView, W: TsView>(read_set: &[R], write_set: &[W]) -> LogicalTs {
    let reads = read_set.iter().map(TsView::wts);
    let writes = write_set.iter().map(|w| w.rts().successor());
    reads.chain(writes).max().unwrap_or(LogicalTs::ZERO)
}

/// Snapshot read timestamp: the largest `wts` in the read set.
pub fn compute_crts<R: TsView>(read_set: &[R]) -> LogicalTs {
    read_set.iter().map(TsView::wts).max().unwrap_or(LogicalTs::ZERO)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn e(wts: u64, rts: u64) -> (LogicalTs, LogicalTs) {
        (LogicalTs(wts), LogicalTs(rts))
    }

    // Brute-force oracle: scan upward for the first timestamp satisfying
    // both constraints.
    fn smallest_cts(reads: &[(LogicalTs, LogicalTs)], writes: &[(LogicalTs, LogicalTs)]) -> u64 {
        (0u64..)
            .find(|&ts| {
                reads.iter().all(|r| r.0 .0 <= ts) && writes.iter().all(|w| ts > w.1 .0)
            })
            .unwrap()
    }

    #[test]
    fn cts_examples() {
        let rs = [e(5, 15), e(10, 20)];
        let ws = [e(5, 15)];
        assert_eq!(compute_cts(&rs, &ws), LogicalTs(16));

        let rs = [e(2, 3), e(2, 2)];
        let ws = [e(2, 3)];
        assert_eq!(compute_cts(&rs, &ws), LogicalTs(4));

        let none: [(LogicalTs, LogicalTs); 0] = [];
        assert_eq!(compute_cts(&[e(0, 0)], &none), LogicalTs(0));
        assert_eq!(compute_cts(&none, &none), LogicalTs(0));
    }

    #[test]
    fn crts_examples() {
        assert_eq!(compute_crts(&[e(2, 3), e(2, 2)]), LogicalTs(2));
        let none: [(LogicalTs, LogicalTs); 0] = [];
        assert_eq!(compute_crts(&none), LogicalTs(0));
        assert_eq!(compute_crts(&[e(7, 9), e(3, 30)]), LogicalTs(7));
    }

    #[test]
    fn txn_id_packing() {
        let id = TxnId::new(3, 17, 99_000);
        assert_eq!((id.node(), id.worker(), id.seq()), (3, 17, 99_000));
        assert_eq!(id.to_string(), "n3.w17.99000");
    }

    #[test]
    fn meta_snapshot_reflects_lock() {
        let mut m = TsMeta::default();
        assert_eq!(m.snapshot(), MetaSnapshot { wts: LogicalTs(0), rts: LogicalTs(0), locked: false });
        m.lock_owner = Some(TxnId::new(0, 0, 1));
        assert!(m.snapshot().locked);
        assert!(m.locked_by_other(TxnId::new(0, 0, 2)));
        assert!(!m.locked_by_other(TxnId::new(0, 0, 1)));
    }

    fn meta_pairs() -> impl Strategy<Value = Vec<(LogicalTs, LogicalTs)>> {
        prop::collection::vec((0u64..40, 0u64..20), 0..5)
            .prop_map(|v| v.into_iter().map(|(w, d)| e(w, w + d)).collect())
    }

    proptest! {
        #[test]
        fn cts_is_minimal_and_valid(reads in meta_pairs(), writes in meta_pairs()) {
            let cts = compute_cts(&reads, &writes);
            prop_assert_eq!(cts.0, smallest_cts(&reads, &writes));
            for r in &reads { prop_assert!(cts >= r.0); }
            for w in &writes { prop_assert!(cts > w.1); }
        }

        #[test]
        fn crts_never_exceeds_cts(reads in meta_pairs(), pick in prop::collection::vec(any::<bool>(), 5)) {
            // Write entries drawn from the read set, as for read-modify-writes.
            let writes: Vec<_> = reads.iter().zip(&pick).filter(|(_, p)| **p).map(|(r, _)| *r).collect();
            prop_assert!(compute_crts(&reads) <= compute_cts(&reads, &writes));
        }
    }
}
