//! Offline history checker.
//!
//! A read is identified by the `wts` it observed: primaries only ever
//! install strictly increasing timestamps per key, so a `(key, wts)` pair
//! names exactly one committed write (or the loaded value at `wts = 0`).
//!
//! `check_serializable` replays the committed history serially in the order
//! the protocol claims (commit timestamp for SCAR, serialization point for
//! the baselines) and requires every read to see the replayed state and the
//! final replayed state to match the primaries. `check_si` checks snapshot
//! reads and first-committer-wins for snapshot transactions, and
//! `brute_force_equivalent` searches all serial orders of a tiny history as
//! an independent cross-check.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::cluster::Protocol;
use crate::scar_engine::{Isolation, TxnContext};
use crate::storage::{initial_value, Epoch, Key};
use crate::timestamps::{LogicalTs, TxnId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteRecord {
    pub key: Key,
    /// Version the write replaced, as seen under its lock.
    pub base_wts: LogicalTs,
    pub value: Box<[u8]>,
}

/// One committed transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryRecord {
    pub tid: TxnId,
    /// Serialization point: order of write-set lock completion.
    pub seq: u64,
    pub isolation: Isolation,
    pub epoch: Epoch,
    pub cts: LogicalTs,
    pub crts: LogicalTs,
    pub serializable_flag: bool,
    pub reads: Vec<(Key, LogicalTs)>,
    pub writes: Vec<WriteRecord>,
}

impl HistoryRecord {
    pub fn from_context(ctx: &TxnContext) -> HistoryRecord {
        HistoryRecord {
            tid: ctx.tid,
            seq: ctx.seq.expect("committed transaction has a serialization point"),
            isolation: ctx.isolation,
            epoch: ctx.epoch,
            cts: ctx.cts,
            crts: ctx.crts,
            serializable_flag: ctx.serializable_flag,
            reads: ctx.read_set.iter().map(|e| (e.key, e.wts)).collect(),
            writes: ctx
                .write_set
                .iter()
                .map(|e| WriteRecord { key: e.key, base_wts: e.wts, value: e.value.clone() })
                .collect(),
        }
    }

    /// Whether its reads must match a serial replay.
    fn checked_as_serializable(&self) -> bool {
        self.isolation == Isolation::Serializable || self.serializable_flag
    }
}

/// Serial order a protocol claims for its committed transactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayOrder {
    /// Commit timestamp, ties broken by serialization point.
    Cts,
    /// Serialization point alone.
    Seq,
}

impl ReplayOrder {
    pub fn for_protocol(p: Protocol) -> ReplayOrder {
        match p {
            Protocol::Scar => ReplayOrder::Cts,
            Protocol::Occ | Protocol::Rc | Protocol::S2pl => ReplayOrder::Seq,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ReplayOrder::Cts => "cts",
            ReplayOrder::Seq => "seq",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct History {
    pub protocol: Protocol,
    pub value_size: usize,
    pub records: Vec<HistoryRecord>,
    /// Final primary `(value, wts)` of every written key. Keys missing here
    /// are not checked.
    pub final_state: BTreeMap<Key, (Box<[u8]>, LogicalTs)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("{tid} read {key}@{observed} but the serial replay holds {key}@{expected}")]
    StaleRead { tid: TxnId, key: Key, observed: LogicalTs, expected: LogicalTs },
    #[error("final state of {key}: replay ends at wts {expected}, primary holds wts {actual}")]
    FinalState { key: Key, expected: LogicalTs, actual: LogicalTs },
    #[error("final value of {key} differs from the replay at wts {wts}")]
    FinalValue { key: Key, wts: LogicalTs },
    #[error("{tid} read {key}@{observed}, not the snapshot version {key}@{expected} at crts {crts}")]
    SnapshotRead { tid: TxnId, key: Key, observed: LogicalTs, expected: LogicalTs, crts: LogicalTs },
    #[error("{tid} wrote {key} over {other} (cts {other_cts}) committed after its snapshot")]
    WriteConflict { tid: TxnId, key: Key, other: TxnId, other_cts: LogicalTs },
    #[error("{tid} read {key}@{wts}, which no committed transaction wrote")]
    Uncommitted { tid: TxnId, key: Key, wts: LogicalTs },
}

impl History {
    pub fn order(&self) -> ReplayOrder {
        ReplayOrder::for_protocol(self.protocol)
    }

    /// Records in the protocol's claimed serial order.
    pub fn ordered(&self) -> Vec<&HistoryRecord> {
        let mut v: Vec<&HistoryRecord> = self.records.iter().collect();
        match self.order() {
            ReplayOrder::Cts => v.sort_by_key(|r| (r.cts, r.seq)),
            ReplayOrder::Seq => v.sort_by_key(|r| r.seq),
        }
        v
    }

    fn loaded(&self, key: Key) -> (Box<[u8]>, LogicalTs) {
        (initial_value(key, self.value_size), LogicalTs::ZERO)
    }

    fn check_final(&self, state: &BTreeMap<Key, (Box<[u8]>, LogicalTs)>) -> Result<(), Violation> {
        for (&key, (value, wts)) in &self.final_state {
            let (rv, rw) = state.get(&key).cloned().unwrap_or_else(|| self.loaded(key));
            if rw != *wts {
                return Err(Violation::FinalState { key, expected: rw, actual: *wts });
            }
            if rv != *value {
                return Err(Violation::FinalValue { key, wts: rw });
            }
        }
        Ok(())
    }
}

/// Serial replay in the claimed order. Reads of serializable transactions
/// (and snapshot transactions flagged serializable) must match; writes of
/// every transaction are applied.
pub fn check_serializable(history: &History) -> Result<(), Violation> {
    let mut state: BTreeMap<Key, (Box<[u8]>, LogicalTs)> = BTreeMap::new();
    for rec in history.ordered() {
        if rec.checked_as_serializable() {
            for &(key, observed) in &rec.reads {
                let expected = state.get(&key).map_or(LogicalTs::ZERO, |s| s.1);
                if observed != expected {
                    return Err(Violation::StaleRead { tid: rec.tid, key, observed, expected });
                }
            }
        }
        for w in &rec.writes {
            state.insert(w.key, (w.value.clone(), rec.cts));
        }
    }
    history.check_final(&state)
}

/// Per-key committed writes sorted by commit timestamp.
fn write_index(history: &History) -> BTreeMap<Key, Vec<(LogicalTs, TxnId)>> {
    let mut idx: BTreeMap<Key, Vec<(LogicalTs, TxnId)>> = BTreeMap::new();
    for rec in &history.records {
        for w in &rec.writes {
            idx.entry(w.key).or_default().push((rec.cts, rec.tid));
        }
    }
    for v in idx.values_mut() {
        v.sort();
    }
    idx
}

/// Snapshot isolation: (a) each read of a snapshot transaction returns the
/// latest version committed at or before its `crts`; (b) no other
/// transaction committed a write to one of its write-set keys after the
/// version it overwrote and at or before its own `cts`. The final state must
/// still match a replay in commit-timestamp order.
pub fn check_si(history: &History) -> Result<(), Violation> {
    let idx = write_index(history);
    for rec in history.records.iter().filter(|r| r.isolation == Isolation::SnapshotIsolation) {
        for &(key, observed) in &rec.reads {
            let expected = idx
                .get(&key)
                .and_then(|ws| ws.iter().rev().find(|(cts, tid)| *cts <= rec.crts && *tid != rec.tid))
                .map_or(LogicalTs::ZERO, |w| w.0);
            if observed != expected {
                return Err(Violation::SnapshotRead { tid: rec.tid, key, observed, expected, crts: rec.crts });
            }
        }
        for w in &rec.writes {
            let conflict = idx.get(&w.key).and_then(|ws| {
                ws.iter().find(|(cts, tid)| *tid != rec.tid && *cts > w.base_wts && *cts <= rec.cts)
            });
            if let Some(&(other_cts, other)) = conflict {
                return Err(Violation::WriteConflict { tid: rec.tid, key: w.key, other, other_cts });
            }
        }
    }
    let mut state = BTreeMap::new();
    for rec in history.ordered() {
        for w in &rec.writes {
            state.insert(w.key, (w.value.clone(), rec.cts));
        }
    }
    history.check_final(&state)
}

/// Read committed: every observed version was written by a committed
/// transaction or loaded.
pub fn check_read_committed(history: &History) -> Result<(), Violation> {
    let idx = write_index(history);
    for rec in &history.records {
        for &(key, wts) in &rec.reads {
            let known = wts == LogicalTs::ZERO || idx.get(&key).is_some_and(|ws| ws.iter().any(|w| w.0 == wts));
            if !known {
                return Err(Violation::Uncommitted { tid: rec.tid, key, wts });
            }
        }
    }
    Ok(())
}

/// Result of an exhaustive search over serial orders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BruteForce {
    /// Serial orders consistent with every read and the final state.
    pub witnesses: u64,
    /// First witness found, as indices into `History::records`.
    pub first: Option<Vec<usize>>,
}

impl BruteForce {
    pub fn passes(&self) -> bool {
        self.witnesses > 0
    }
}

pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Tries every serial order of a history of at most
/// [`BRUTE_FORCE_LIMIT`] transactions. All reads are checked, whatever the
/// isolation level.
pub fn brute_force_equivalent(history: &History) -> BruteForce {
    let n = history.records.len();
    assert!(n <= BRUTE_FORCE_LIMIT, "brute force is limited to {BRUTE_FORCE_LIMIT} transactions, got {n}");
    let mut search = Search { h: history, order: Vec::with_capacity(n), used: vec![false; n], found: None, count: 0 };
    search.run(&mut BTreeMap::new());
    BruteForce { witnesses: search.count, first: search.found }
}

struct Search<'a> {
    h: &'a History,
    order: Vec<usize>,
    used: Vec<bool>,
    found: Option<Vec<usize>>,
    count: u64,
}

impl Search<'_> {
    fn run(&mut self, state: &mut BTreeMap<Key, LogicalTs>) {
        let n = self.h.records.len();
        if self.order.len() == n {
            let final_ok = self
                .h
                .final_state
                .iter()
                .all(|(k, (_, wts))| state.get(k).copied().unwrap_or(LogicalTs::ZERO) == *wts);
            if final_ok {
                self.count += 1;
                self.found.get_or_insert_with(|| self.order.clone());
            }
            return;
        }
        for i in 0..n {
            if self.used[i] {
                continue;
            }
            let rec = &self.h.records[i];
            let reads_ok =
                rec.reads.iter().all(|(k, wts)| state.get(k).copied().unwrap_or(LogicalTs::ZERO) == *wts);
            if !reads_ok {
                continue;
            }
            let saved: Vec<(Key, Option<LogicalTs>)> =
                rec.writes.iter().map(|w| (w.key, state.insert(w.key, rec.cts))).collect();
            self.used[i] = true;
            self.order.push(i);
            self.run(state);
            self.order.pop();
            self.used[i] = false;
            for (k, old) in saved.into_iter().rev() {
                match old {
                    Some(v) => state.insert(k, v),
                    None => state.remove(&k),
                };
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum HistoryFileError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

fn unhex(s: &str) -> Result<Box<[u8]>, String> {
    if !s.len().is_multiple_of(2) {
        return Err(format!("odd-length hex {s:?}"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| format!("bad hex {s:?}: {e}")))
        .collect()
}

fn parse_key(s: &str) -> Result<Key, String> {
    let (p, r) = s.split_once(':').ok_or_else(|| format!("bad key {s:?}"))?;
    Ok(Key::new(p.parse().map_err(|_| format!("bad key {s:?}"))?, r.parse().map_err(|_| format!("bad key {s:?}"))?))
}

fn parse_num<T: std::str::FromStr>(field: &str, s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad {field} {s:?}"))
}

impl fmt::Display for History {
    /// Text encoding, one record per line:
    ///
    /// ```text
    /// # protocol=scar order=cts value_size=100
    /// txn seq=3 tid=281479271677952 iso=SR epoch=2 cts=16 crts=16 flag=1 reads=0:5@15,1:7@2 writes=0:5@15=00ff..
    /// state key=0:5 wts=16 value=00ff..
    /// ```
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# protocol={} order={} value_size={}", self.protocol, self.order().name(), self.value_size)?;
        for r in &self.records {
            let reads: Vec<String> = r.reads.iter().map(|(k, w)| format!("{k}@{w}")).collect();
            let writes: Vec<String> =
                r.writes.iter().map(|w| format!("{}@{}={}", w.key, w.base_wts, hex(&w.value))).collect();
            writeln!(
                f,
                "txn seq={} tid={} iso={} epoch={} cts={} crts={} flag={} reads={} writes={}",
                r.seq,
                r.tid.0,
                r.isolation.short(),
                r.epoch,
                r.cts,
                r.crts,
                r.serializable_flag as u8,
                reads.join(","),
                writes.join(",")
            )?;
        }
        for (k, (v, w)) in &self.final_state {
            writeln!(f, "state key={k} wts={w} value={}", hex(v))?;
        }
        Ok(())
    }
}

impl History {
    pub fn parse(text: &str) -> Result<History, HistoryFileError> {
        let mut protocol = None;
        let mut value_size = None;
        let mut records = Vec::new();
        let mut final_state = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| HistoryFileError::Parse { line: i + 1, msg };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            let mut fields = BTreeMap::new();
            for tok in rest.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| err(format!("expected key=value, got {tok:?}")))?;
                fields.insert(k, v);
            }
            let get = |name: &str| fields.get(name).copied().ok_or_else(|| err(format!("missing field {name}")));
            match kind {
                "#" => {
                    if let Some(p) = fields.get("protocol") {
                        protocol = Some(p.parse::<Protocol>().map_err(err)?);
                    }
                    if let Some(v) = fields.get("value_size") {
                        value_size = Some(parse_num("value_size", v).map_err(err)?);
                    }
                }
                "txn" => {
                    let reads = get("reads")?
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            let (k, w) = s.split_once('@').ok_or(format!("bad read {s:?}"))?;
                            Ok((parse_key(k)?, LogicalTs(parse_num("wts", w)?)))
                        })
                        .collect::<Result<Vec<_>, String>>()
                        .map_err(err)?;
                    let writes = get("writes")?
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            let (k, rest) = s.split_once('@').ok_or(format!("bad write {s:?}"))?;
                            let (w, v) = rest.split_once('=').ok_or(format!("bad write {s:?}"))?;
                            Ok(WriteRecord {
                                key: parse_key(k)?,
                                base_wts: LogicalTs(parse_num("wts", w)?),
                                value: unhex(v)?,
                            })
                        })
                        .collect::<Result<Vec<_>, String>>()
                        .map_err(err)?;
                    records.push(HistoryRecord {
                        tid: TxnId(parse_num("tid", get("tid")?).map_err(err)?),
                        seq: parse_num("seq", get("seq")?).map_err(err)?,
                        isolation: get("iso")?.parse().map_err(err)?,
                        epoch: parse_num("epoch", get("epoch")?).map_err(err)?,
                        cts: LogicalTs(parse_num("cts", get("cts")?).map_err(err)?),
                        crts: LogicalTs(parse_num("crts", get("crts")?).map_err(err)?),
                        serializable_flag: get("flag")? == "1",
                        reads,
                        writes,
                    });
                }
                "state" => {
                    let key = parse_key(get("key")?).map_err(err)?;
                    let wts = LogicalTs(parse_num("wts", get("wts")?).map_err(err)?);
                    final_state.insert(key, (unhex(get("value")?).map_err(err)?, wts));
                }
                other => return Err(err(format!("unknown record type {other:?}"))),
            }
        }
        Ok(History {
            protocol: protocol.ok_or(HistoryFileError::Parse { line: 1, msg: "missing protocol header".into() })?,
            value_size: value_size.ok_or(HistoryFileError::Parse { line: 1, msg: "missing value_size".into() })?,
            records,
            final_state,
        })
    }

    pub fn write_to(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_string())
    }

    pub fn read_from(path: &Path) -> Result<History, HistoryFileError> {
        History::parse(&std::fs::read_to_string(path)?)
    }
}

/// Runs the checks that apply to the history's protocol and isolation.
pub fn check_history(history: &History) -> Result<(), Violation> {
    match history.protocol {
        Protocol::Rc => check_read_committed(history),
        _ => {
            if history.records.iter().any(|r| r.isolation == Isolation::SnapshotIsolation) {
                check_si(history)?;
            }
            check_serializable(history)
        }
    }
}
