use std::collections::BinaryHeap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Ipv4Addr, Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{codec, Counters, Event, Msg, Network, Payload, SimTime};
use crate::storage::NodeId;

struct TimerEntry<T> {
    at: SimTime,
    seq: u64,
    timer: T,
}

impl<T> PartialEq for TimerEntry<T> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<T> Eq for TimerEntry<T> {}
impl<T> PartialOrd for TimerEntry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for TimerEntry<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Loopback TCP transport. Every ordered node pair gets its own
/// connection; one reader thread per connection decodes frames into a
/// shared channel drained by [`Network::next_event`]. Time is wall-clock
/// nanoseconds since construction.
pub struct SocketNetwork<T> {
    start: Instant,
    links: Vec<Vec<BufWriter<TcpStream>>>,
    rx: Receiver<io::Result<Msg>>,
    readers: Vec<JoinHandle<()>>,
    timers: BinaryHeap<TimerEntry<T>>,
    timer_seq: u64,
    inflight: usize,
    counters: Counters,
}

fn read_frames(stream: TcpStream, tx: Sender<io::Result<Msg>>) {
    let mut reader = BufReader::new(stream);
    let mut len = [0u8; 4];
    loop {
        match reader.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return,
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
        let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
        if let Err(e) = reader.read_exact(&mut body) {
            let _ = tx.send(Err(e));
            return;
        }
        let msg = codec::decode_body(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e));
        if tx.send(msg).is_err() {
            return;
        }
    }
}

impl<T> SocketNetwork<T> {
    pub fn new(nodes: usize) -> io::Result<SocketNetwork<T>> {
        let listeners = (0..nodes)
            .map(|_| TcpListener::bind((Ipv4Addr::LOCALHOST, 0)))
            .collect::<io::Result<Vec<_>>>()?;
        let (tx, rx) = mpsc::channel();
        let mut links = Vec::with_capacity(nodes);
        let mut readers = Vec::new();
        for _src in 0..nodes {
            let mut row = Vec::with_capacity(nodes);
            for listener in &listeners {
                let out = TcpStream::connect(listener.local_addr()?)?;
                out.set_nodelay(true)?;
                let (incoming, _) = listener.accept()?;
                let tx = tx.clone();
                readers.push(thread::spawn(move || read_frames(incoming, tx)));
                row.push(BufWriter::new(out));
            }
            links.push(row);
        }
        Ok(SocketNetwork {
            start: Instant::now(),
            links,
            rx,
            readers,
            timers: BinaryHeap::new(),
            timer_seq: 0,
            inflight: 0,
            counters: Counters::default(),
        })
    }
}

impl<T> Network<T> for SocketNetwork<T> {
    fn now(&self) -> SimTime {
        self.start.elapsed().as_nanos() as SimTime
    }

    fn send(&mut self, src: NodeId, dst: NodeId, payload: Payload) {
        self.counters.record(payload.kind());
        let frame = codec::encode(src, dst, &payload);
        let link = &mut self.links[src as usize][dst as usize];
        link.write_all(&frame).and_then(|_| link.flush()).expect("loopback send failed");
        self.inflight += 1;
    }

    fn schedule(&mut self, at: SimTime, timer: T) {
        let seq = self.timer_seq;
        self.timer_seq += 1;
        self.timers.push(TimerEntry { at, seq, timer });
    }

    fn next_event(&mut self) -> Option<Event<T>> {
        loop {
            let now = self.now();
            if let Some(t) = self.timers.peek() {
                if t.at <= now {
                    return self.timers.pop().map(|t| Event::Timer(t.timer));
                }
            }
            let wait = match self.timers.peek() {
                Some(t) => Duration::from_nanos(t.at - now),
                None if self.inflight == 0 => return None,
                None => Duration::from_secs(30),
            };
            if self.inflight == 0 {
                thread::sleep(wait);
                continue;
            }
            match self.rx.recv_timeout(wait) {
                Ok(Ok(mut msg)) => {
                    self.inflight -= 1;
                    msg.deliver_time = self.now();
                    return Some(Event::Deliver(msg));
                }
                Ok(Err(e)) => panic!("loopback receive failed: {e}"),
                Err(RecvTimeoutError::Timeout) => {
                    assert!(!self.timers.is_empty(), "message lost on loopback");
                }
                Err(RecvTimeoutError::Disconnected) => panic!("loopback readers exited"),
            }
        }
    }

    fn purge_messages(&mut self) {
        panic!("the socket transport does not support failure injection");
    }

    fn set_failed(&mut self, _node: NodeId, _failed: bool) {
        panic!("the socket transport does not support failure injection");
    }

    fn counters(&self) -> &Counters {
        &self.counters
    }

    fn reset_counters(&mut self) {
        self.counters.reset();
    }
}

impl<T> Drop for SocketNetwork<T> {
    fn drop(&mut self) {
        for row in &mut self.links {
            for link in row.iter_mut() {
                let _ = link.flush();
                let _ = link.get_ref().shutdown(Shutdown::Both);
            }
        }
        for r in self.readers.drain(..) {
            let _ = r.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::Key;
    use crate::timestamps::TxnId;
    use crate::transport::{MsgKind, ReadLock};

    #[test]
    fn frames_cross_loopback() {
        let mut net: SocketNetwork<u8> = SocketNetwork::new(3).unwrap();
        let req = Payload::ReadReq { txn: TxnId::new(0, 1, 2), key: Key::new(2, 5), lock: ReadLock::None };
        net.send(0, 2, req.clone());
        net.send(1, 1, Payload::CopyReq { partitions: vec![4] });
        let mut got = vec![];
        while let Some(ev) = net.next_event() {
            match ev {
                Event::Deliver(m) => got.push((m.src, m.dst, m.payload)),
                other => panic!("unexpected {other:?}"),
            }
        }
        got.sort_by_key(|g| g.0);
        assert_eq!(got[0], (0, 2, req));
        assert_eq!(got[1].0, 1);
        assert_eq!(net.counters().get(MsgKind::ReadReq), 1);
        assert_eq!(net.counters().total(), 2);
    }

    #[test]
    fn timers_fire_in_order() {
        let mut net: SocketNetwork<u8> = SocketNetwork::new(1).unwrap();
        let now = net.now();
        net.schedule(now + 2_000_000, 2);
        net.schedule(now + 1_000_000, 1);
        assert!(matches!(net.next_event(), Some(Event::Timer(1))));
        assert!(matches!(net.next_event(), Some(Event::Timer(2))));
        assert!(net.now() >= now + 2_000_000);
        assert!(net.next_event().is_none());
    }
}
