//! Binary wire format.
//!
//! A frame is a little-endian `u32` byte length of everything after it,
//! followed by the header and the payload:
//!
//! ```text
//! frame   := len:u32 kind:u8 src:u16 dst:u16 payload
//! key     := partition:u32 row:u64
//! ts      := u64
//! txn     := u64
//! bytes   := len:u32 byte*len
//! vec<T>  := count:u32 T*count
//! opt_ts  := 0:u8 | 1:u8 ts
//! ```
//!
//! Payloads by kind (all integers little-endian):
//!
//! ```text
//! 0  read_req      txn key lock:u8 (0 none, 1 shared, 2 exclusive)
//! 1  read_rep      txn key ok:u8 bytes wts:ts rts:ts
//! 2  lock_req      txn vec<key opt_ts>
//! 3  lock_rep      txn vec<key outcome>
//!                  outcome := 0:u8 wts rts | 1:u8 | 2:u8 wts      (acquired | busy | stale)
//! 4  validate_req  txn mode:u8 (0 extend, 1 version) vec<key wts:ts target:ts>
//! 5  validate_rep  txn vec<key status:u8 (0 ok, 1 stale, 2 blocked) wts:ts rts:ts>
//! 6  write_req     txn epoch:u64 cts:ts vec<key bytes> vec<key>
//! 7  replicate_req txn epoch:u64 cts:ts vec<key bytes>
//! 8  replicate_ack txn epoch:u64
//! 9  ts_sync       vec<key wts:ts rts:ts>
//! 10 unlock        txn vec<key>
//! 11 epoch_barrier epoch:u64 phase:u8 (0 prepare, 1 commit)
//! 12 barrier_ack   epoch:u64 max_ts:ts
//! 13 copy_req      vec<partition:u32>
//! 14 copy_rep      partition:u32 vec<row:u64 bytes wts rts has_live:u8 [bytes wts rts]>
//! ```

use thiserror::Error;

use super::{
    BarrierPhase, LockItem, LockResult, Msg, MsgKind, Payload, ReadLock, SyncItem, ValidateItem, ValidateMode,
    ValidateResult, ValidateStatus, WriteItem,
};
use crate::storage::{CopyRecord, Key, LockOutcome, NodeId, ReadResult};
use crate::timestamps::{LogicalTs, TxnId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("frame truncated")]
    Truncated,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("invalid tag {tag} for {field}")]
    BadTag { field: &'static str, tag: u8 },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn ts(&mut self, v: LogicalTs) {
        self.u64(v.0);
    }
    fn txn(&mut self, v: TxnId) {
        self.u64(v.0);
    }
    fn key(&mut self, k: Key) {
        self.u32(k.partition);
        self.u64(k.row);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn vec<T>(&mut self, items: &[T], mut f: impl FnMut(&mut Self, &T)) {
        self.u32(items.len() as u32);
        for it in items {
            f(self, it);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn ts(&mut self) -> Result<LogicalTs, DecodeError> {
        self.u64().map(LogicalTs)
    }
    fn txn(&mut self) -> Result<TxnId, DecodeError> {
        self.u64().map(TxnId)
    }
    fn key(&mut self) -> Result<Key, DecodeError> {
        Ok(Key { partition: self.u32()?, row: self.u64()? })
    }
    fn bytes(&mut self) -> Result<Box<[u8]>, DecodeError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.into())
    }
    fn vec<T>(&mut self, mut f: impl FnMut(&mut Self) -> Result<T, DecodeError>) -> Result<Vec<T>, DecodeError> {
        let n = self.u32()? as usize;
        // Every element takes at least one byte; reject absurd counts early.
        if n > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        (0..n).map(|_| f(self)).collect()
    }
}

fn write_payload(w: &mut Writer, p: &Payload) {
    match p {
        Payload::ReadReq { txn, key, lock } => {
            w.txn(*txn);
            w.key(*key);
            w.u8(match lock {
                ReadLock::None => 0,
                ReadLock::Shared => 1,
                ReadLock::Exclusive => 2,
            });
        }
        Payload::ReadRep { txn, key, ok, value, wts, rts } => {
            w.txn(*txn);
            w.key(*key);
            w.u8(*ok as u8);
            w.bytes(value);
            w.ts(*wts);
            w.ts(*rts);
        }
        Payload::LockReq { txn, items } => {
            w.txn(*txn);
            w.vec(items, |w, it| {
                w.key(it.key);
                match it.expected {
                    None => w.u8(0),
                    Some(ts) => {
                        w.u8(1);
                        w.ts(ts);
                    }
                }
            });
        }
        Payload::LockRep { txn, items } => {
            w.txn(*txn);
            w.vec(items, |w, it| {
                w.key(it.key);
                match it.outcome {
                    LockOutcome::Acquired { wts, rts } => {
                        w.u8(0);
                        w.ts(wts);
                        w.ts(rts);
                    }
                    LockOutcome::Busy => w.u8(1),
                    LockOutcome::Stale { wts } => {
                        w.u8(2);
                        w.ts(wts);
                    }
                }
            });
        }
        Payload::ValidateReq { txn, mode, items } => {
            w.txn(*txn);
            w.u8(match mode {
                ValidateMode::Extend => 0,
                ValidateMode::Version => 1,
            });
            w.vec(items, |w, it| {
                w.key(it.key);
                w.ts(it.wts);
                w.ts(it.target);
            });
        }
        Payload::ValidateRep { txn, items } => {
            w.txn(*txn);
            w.vec(items, |w, it| {
                w.key(it.key);
                w.u8(match it.status {
                    ValidateStatus::Ok => 0,
                    ValidateStatus::Stale => 1,
                    ValidateStatus::Blocked => 2,
                });
                w.ts(it.wts);
                w.ts(it.rts);
            });
        }
        Payload::WriteReq { txn, epoch, cts, items, release } => {
            w.txn(*txn);
            w.u64(*epoch);
            w.ts(*cts);
            w.vec(items, |w, it| {
                w.key(it.key);
                w.bytes(&it.value);
            });
            w.vec(release, |w, k| w.key(*k));
        }
        Payload::ReplicateReq { txn, epoch, cts, items } => {
            w.txn(*txn);
            w.u64(*epoch);
            w.ts(*cts);
            w.vec(items, |w, it| {
                w.key(it.key);
                w.bytes(&it.value);
            });
        }
        Payload::ReplicateAck { txn, epoch } => {
            w.txn(*txn);
            w.u64(*epoch);
        }
        Payload::TsSync { items } => {
            w.vec(items, |w, it| {
                w.key(it.key);
                w.ts(it.wts);
                w.ts(it.rts);
            });
        }
        Payload::Unlock { txn, keys } => {
            w.txn(*txn);
            w.vec(keys, |w, k| w.key(*k));
        }
        Payload::EpochBarrier { epoch, phase } => {
            w.u64(*epoch);
            w.u8(match phase {
                BarrierPhase::Prepare => 0,
                BarrierPhase::Commit => 1,
            });
        }
        Payload::BarrierAck { epoch, max_ts } => {
            w.u64(*epoch);
            w.ts(*max_ts);
        }
        Payload::CopyReq { partitions } => {
            w.vec(partitions, |w, p| w.u32(*p));
        }
        Payload::CopyRep { partition, records } => {
            w.u32(*partition);
            w.vec(records, |w, r| {
                w.u64(r.row);
                w.bytes(&r.closed.value);
                w.ts(r.closed.wts);
                w.ts(r.closed.rts);
                match &r.live {
                    None => w.u8(0),
                    Some(live) => {
                        w.u8(1);
                        w.bytes(&live.value);
                        w.ts(live.wts);
                        w.ts(live.rts);
                    }
                }
            });
        }
    }
}

fn read_payload(r: &mut Reader<'_>, kind: MsgKind) -> Result<Payload, DecodeError> {
    let bad = |field, tag| DecodeError::BadTag { field, tag };
    Ok(match kind {
        MsgKind::ReadReq => Payload::ReadReq {
            txn: r.txn()?,
            key: r.key()?,
            lock: match r.u8()? {
                0 => ReadLock::None,
                1 => ReadLock::Shared,
                2 => ReadLock::Exclusive,
                t => return Err(bad("read lock", t)),
            },
        },
        MsgKind::ReadRep => Payload::ReadRep {
            txn: r.txn()?,
            key: r.key()?,
            ok: match r.u8()? {
                0 => false,
                1 => true,
                t => return Err(bad("ok flag", t)),
            },
            value: r.bytes()?,
            wts: r.ts()?,
            rts: r.ts()?,
        },
        MsgKind::LockReq => Payload::LockReq {
            txn: r.txn()?,
            items: r.vec(|r| {
                let key = r.key()?;
                let expected = match r.u8()? {
                    0 => None,
                    1 => Some(r.ts()?),
                    t => return Err(bad("expected wts", t)),
                };
                Ok(LockItem { key, expected })
            })?,
        },
        MsgKind::LockRep => Payload::LockRep {
            txn: r.txn()?,
            items: r.vec(|r| {
                let key = r.key()?;
                let outcome = match r.u8()? {
                    0 => LockOutcome::Acquired { wts: r.ts()?, rts: r.ts()? },
                    1 => LockOutcome::Busy,
                    2 => LockOutcome::Stale { wts: r.ts()? },
                    t => return Err(bad("lock outcome", t)),
                };
                Ok(LockResult { key, outcome })
            })?,
        },
        MsgKind::ValidateReq => Payload::ValidateReq {
            txn: r.txn()?,
            mode: match r.u8()? {
                0 => ValidateMode::Extend,
                1 => ValidateMode::Version,
                t => return Err(bad("validate mode", t)),
            },
            items: r.vec(|r| Ok(ValidateItem { key: r.key()?, wts: r.ts()?, target: r.ts()? }))?,
        },
        MsgKind::ValidateRep => Payload::ValidateRep {
            txn: r.txn()?,
            items: r.vec(|r| {
                let key = r.key()?;
                let status = match r.u8()? {
                    0 => ValidateStatus::Ok,
                    1 => ValidateStatus::Stale,
                    2 => ValidateStatus::Blocked,
                    t => return Err(bad("validate status", t)),
                };
                Ok(ValidateResult { key, status, wts: r.ts()?, rts: r.ts()? })
            })?,
        },
        MsgKind::WriteReq => Payload::WriteReq {
            txn: r.txn()?,
            epoch: r.u64()?,
            cts: r.ts()?,
            items: r.vec(|r| Ok(WriteItem { key: r.key()?, value: r.bytes()? }))?,
            release: r.vec(|r| r.key())?,
        },
        MsgKind::ReplicateReq => Payload::ReplicateReq {
            txn: r.txn()?,
            epoch: r.u64()?,
            cts: r.ts()?,
            items: r.vec(|r| Ok(WriteItem { key: r.key()?, value: r.bytes()? }))?,
        },
        MsgKind::ReplicateAck => Payload::ReplicateAck { txn: r.txn()?, epoch: r.u64()? },
        MsgKind::TsSync => Payload::TsSync {
            items: r.vec(|r| Ok(SyncItem { key: r.key()?, wts: r.ts()?, rts: r.ts()? }))?,
        },
        MsgKind::Unlock => Payload::Unlock { txn: r.txn()?, keys: r.vec(|r| r.key())? },
        MsgKind::EpochBarrier => Payload::EpochBarrier {
            epoch: r.u64()?,
            phase: match r.u8()? {
                0 => BarrierPhase::Prepare,
                1 => BarrierPhase::Commit,
                t => return Err(bad("barrier phase", t)),
            },
        },
        MsgKind::BarrierAck => Payload::BarrierAck { epoch: r.u64()?, max_ts: r.ts()? },
        MsgKind::CopyReq => Payload::CopyReq { partitions: r.vec(|r| r.u32())? },
        MsgKind::CopyRep => Payload::CopyRep {
            partition: r.u32()?,
            records: r.vec(|r| {
                let row = r.u64()?;
                let closed = ReadResult { value: r.bytes()?, wts: r.ts()?, rts: r.ts()? };
                let live = match r.u8()? {
                    0 => None,
                    1 => Some(ReadResult { value: r.bytes()?, wts: r.ts()?, rts: r.ts()? }),
                    t => return Err(bad("live flag", t)),
                };
                Ok(CopyRecord { row, closed, live })
            })?,
        },
    })
}

/// Encodes one length-prefixed frame.
pub fn encode(src: NodeId, dst: NodeId, payload: &Payload) -> Vec<u8> {
    let mut w = Writer { buf: vec![0; 4] };
    w.u8(payload.kind() as u8);
    w.u16(src);
    w.u16(dst);
    write_payload(&mut w, payload);
    let len = (w.buf.len() - 4) as u32;
    w.buf[..4].copy_from_slice(&len.to_le_bytes());
    w.buf
}

/// Decodes the body of a frame (everything after the length prefix).
/// Times are left at zero; the receiver stamps them.
pub fn decode_body(body: &[u8]) -> Result<Msg, DecodeError> {
    let mut r = Reader { buf: body };
    let tag = r.u8()?;
    let kind = MsgKind::from_u8(tag).ok_or(DecodeError::UnknownKind(tag))?;
    let src = r.u16()?;
    let dst = r.u16()?;
    let payload = read_payload(&mut r, kind)?;
    if !r.buf.is_empty() {
        return Err(DecodeError::Trailing(r.buf.len()));
    }
    Ok(Msg { src, dst, send_time: 0, deliver_time: 0, payload })
}

/// Decodes a whole frame including its length prefix.
pub fn decode(frame: &[u8]) -> Result<Msg, DecodeError> {
    if frame.len() < 4 {
        return Err(DecodeError::Truncated);
    }
    let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
    let body = frame.get(4..4 + len).ok_or(DecodeError::Truncated)?;
    if frame.len() != 4 + len {
        return Err(DecodeError::Trailing(frame.len() - 4 - len));
    }
    decode_body(body)
}
