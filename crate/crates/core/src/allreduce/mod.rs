//! Tree collectives (broadcast, reduce-sum, allreduce, gather, barrier) over
//! a pluggable point-to-point [`Transport`].
//!
//! Reductions are deterministic: contributions travel up the tree tagged
//! with their worker id and the root adds them left to right in ascending
//! worker id ([`pinned_sum`]). The result is therefore bitwise independent
//! of tree shape and identical on every worker.

mod cost;
mod frame;
pub mod local;
pub mod tcp;
mod topology;

use serde::{Deserialize, Serialize};

pub use cost::{estimate_comm_cost, CommCostModel};
pub use frame::{bytes_to_f64s, f64s_to_bytes, Frame, OpCode, HEADER_LEN, MAGIC};
pub use local::{local_mesh, LocalTransport};
pub use tcp::TcpTransport;
pub use topology::TreeTopology;

use crate::data::take_u64;
use crate::error::{Error, Result};

/// Point-to-point frame delivery between tree neighbours.
pub trait Transport: Send {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()>;
    fn recv(&mut self, from: usize) -> Result<Frame>;
}

/// Sum of equal-length vectors, accumulated strictly left to right.
pub fn pinned_sum<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut iter = parts.into_iter();
    let Some(first) = iter.next() else { return Vec::new() };
    let mut acc = first.to_vec();
    for part in iter {
        assert_eq!(part.len(), acc.len(), "pinned_sum over unequal lengths");
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommCounters {
    pub broadcasts: u64,
    pub allreduces: u64,
    pub gathers: u64,
    pub barriers: u64,
    pub frames_sent: u64,
    pub bytes_sent: u64,
}

/// One allreduce as seen by one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub local: Vec<f64>,
    pub result: Vec<f64>,
}

/// A worker's handle on the collective layer. Collectives must be called by
/// every worker in the same order.
pub struct Communicator<T: Transport> {
    rank: usize,
    topo: TreeTopology,
    transport: T,
    round: u64,
    counters: CommCounters,
    round_log: Option<Vec<RoundRecord>>,
}

impl<T: Transport> Communicator<T> {
    pub fn new(rank: usize, topo: TreeTopology, transport: T) -> Self {
        assert!(rank < topo.size());
        Communicator { rank, topo, transport, round: 0, counters: CommCounters::default(), round_log: None }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.topo.size()
    }

    pub fn is_root(&self) -> bool {
        self.rank == self.topo.root()
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topo
    }

    pub fn counters(&self) -> CommCounters {
        self.counters
    }

    /// Records every allreduce's local input and result from now on.
    pub fn enable_round_log(&mut self) {
        self.round_log.get_or_insert_with(Vec::new);
    }

    pub fn take_round_log(&mut self) -> Vec<RoundRecord> {
        self.round_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn send(&mut self, to: usize, op: OpCode, payload: Vec<u8>) -> Result<()> {
        let frame = Frame::new(op, self.round, payload);
        self.counters.frames_sent += 1;
        self.counters.bytes_sent += frame.encoded_len() as u64;
        self.transport.send(to, frame)
    }

    fn recv(&mut self, from: usize, op: OpCode) -> Result<Vec<u8>> {
        let frame = self.transport.recv(from)?;
        if frame.op != op {
            return Err(Error::Protocol(format!(
                "worker {}: expected {op:?} from worker {from}, got {:?}",
                self.rank, frame.op
            )));
        }
        if frame.round != self.round {
            return Err(Error::Protocol(format!(
                "worker {}: expected round {} from worker {from}, got {}",
                self.rank, self.round, frame.round
            )));
        }
        Ok(frame.payload)
    }

    /// Root-to-leaves fan-out of the current round.
    fn down(&mut self, op: OpCode, at_root: Option<Vec<u8>>) -> Result<Vec<u8>> {
        let value = match self.topo.parent(self.rank) {
            None => at_root.expect("tree root supplies the value"),
            Some(parent) => self.recv(parent, op)?,
        };
        for child in self.topo.children(self.rank).to_vec() {
            self.send(child, op, value.clone())?;
        }
        Ok(value)
    }

    /// Leaves-to-root collection of `(worker, bytes)` entries for the current
    /// round. Returns every worker's entry at the root, in ascending worker
    /// id, and `None` elsewhere.
    fn up(&mut self, op: OpCode, local: Vec<u8>) -> Result<Option<Vec<(usize, Vec<u8>)>>> {
        let mut entries = vec![(self.rank, local)];
        for child in self.topo.children(self.rank).to_vec() {
            let payload = self.recv(child, op)?;
            entries.extend(decode_entries(&payload)?);
        }
        match self.topo.parent(self.rank) {
            Some(parent) => {
                self.send(parent, op, encode_entries(&entries))?;
                Ok(None)
            }
            None => {
                entries.sort_by_key(|(w, _)| *w);
                let ids: Vec<usize> = entries.iter().map(|(w, _)| *w).collect();
                if ids != (0..self.size()).collect::<Vec<_>>() {
                    return Err(Error::Protocol(format!("collected contributions from {ids:?}")));
                }
                Ok(Some(entries))
            }
        }
    }

    /// Every worker ends up with a copy of `value` from worker `root`
    /// (`value` is ignored elsewhere).
    pub fn broadcast(&mut self, value: Option<Vec<u8>>, root: usize) -> Result<Vec<u8>> {
        if root >= self.size() {
            return Err(Error::Config(format!("broadcast root {root} out of range")));
        }
        self.round += 1;
        self.counters.broadcasts += 1;
        let mut held = if self.rank == root {
            Some(value.ok_or_else(|| Error::Config("broadcast root must supply a value".into()))?)
        } else {
            None
        };
        // Relay the value up to the tree root first when needed.
        let path = self.topo.path_to_root(root);
        if let Some(pos) = path.iter().position(|&w| w == self.rank) {
            if pos > 0 {
                held = Some(self.recv(path[pos - 1], OpCode::Broadcast)?);
            }
            if let Some(&next) = path.get(pos + 1) {
                let v = held.clone().expect("relay holds the value");
                self.send(next, OpCode::Broadcast, v)?;
            }
        }
        self.down(OpCode::Broadcast, held)
    }

    /// Sum of every worker's `local`, delivered to all workers.
    pub fn allreduce_sum(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        self.round += 1;
        self.counters.allreduces += 1;
        let gathered = self.up(OpCode::Reduce, f64s_to_bytes(local))?;
        let at_root = match gathered {
            Some(entries) => {
                let vectors = entries
                    .iter()
                    .map(|(w, b)| bytes_to_f64s(b).map(|v| (*w, v)))
                    .collect::<Result<Vec<_>>>()?;
                if let Some((w, v)) = vectors.iter().find(|(_, v)| v.len() != local.len()) {
                    return Err(Error::Protocol(format!(
                        "allreduce length mismatch: worker {w} sent {} values, expected {}",
                        v.len(),
                        local.len()
                    )));
                }
                Some(f64s_to_bytes(&pinned_sum(vectors.iter().map(|(_, v)| v.as_slice()))))
            }
            None => None,
        };
        let result = bytes_to_f64s(&self.down(OpCode::Broadcast, at_root)?)?;
        if result.len() != local.len() {
            return Err(Error::Protocol(format!(
                "worker {}: allreduce result has {} values, contributed {}",
                self.rank,
                result.len(),
                local.len()
            )));
        }
        if let Some(log) = self.round_log.as_mut() {
            log.push(RoundRecord { round: self.round, local: local.to_vec(), result: result.clone() });
        }
        Ok(result)
    }

    /// Every worker's bytes at the root (ascending worker id), `None`
    /// elsewhere.
    pub fn gather(&mut self, local: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        self.round += 1;
        self.counters.gathers += 1;
        Ok(self.up(OpCode::Gather, local)?.map(|e| e.into_iter().map(|(_, b)| b).collect()))
    }

    pub fn barrier(&mut self) -> Result<()> {
        self.round += 1;
        self.counters.barriers += 1;
        self.up(OpCode::Barrier, Vec::new())?;
        self.down(OpCode::Barrier, Some(Vec::new()))?;
        Ok(())
    }

    /// Collective end of job; the root tells everyone to stop.
    pub fn shutdown(&mut self) -> Result<()> {
        self.round += 1;
        self.down(OpCode::Shutdown, Some(Vec::new()))?;
        Ok(())
    }
}

fn encode_entries(entries: &[(usize, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (w, bytes) in entries {
        out.extend_from_slice(&(*w as u64).to_le_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(bytes);
    }
    out
}

fn decode_entries(mut buf: &[u8]) -> Result<Vec<(usize, Vec<u8>)>> {
    let mut out = Vec::new();
    let proto = |e: Error| Error::Protocol(format!("malformed collective payload: {e}"));
    while !buf.is_empty() {
        let w = take_u64(&mut buf).map_err(proto)? as usize;
        let len = take_u64(&mut buf).map_err(proto)? as usize;
        if buf.len() < len {
            return Err(Error::Protocol("collective payload truncated".into()));
        }
        let (head, rest) = buf.split_at(len);
        out.push((w, head.to_vec()));
        buf = rest;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;
    use std::time::Duration;

    fn run<R: Send>(p: usize, fanout: usize, f: impl Fn(&mut Communicator<LocalTransport>) -> R + Sync) -> Vec<R> {
        let topo = TreeTopology::new(p, fanout, 0).unwrap();
        let comms = local_mesh(&topo, Duration::from_secs(10));
        thread::scope(|s| {
            let handles: Vec<_> = comms.into_iter().map(|mut c| { let f = &f; s.spawn(move || f(&mut c)) }).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    #[test]
    fn single_worker_allreduce_is_identity() {
        let out = run(1, 2, |c| c.allreduce_sum(&[1.5, -2.0]).unwrap());
        assert_eq!(out, vec![vec![1.5, -2.0]]);
    }

    #[test]
    fn indicator_sum() {
        let out = run(4, 2, |c| {
            let mut e = vec![0.0; 4];
            e[c.rank()] = 1.0;
            c.allreduce_sum(&e).unwrap()
        });
        for v in out {
            assert_eq!(v, vec![1.0; 4]);
        }
    }

    fn contribution(rank: usize) -> Vec<f64> {
        // Values chosen so that summation order changes the bits.
        (0..5).map(|i| ((rank * 7 + i) as f64 * 0.731).sin() * 10f64.powi((rank as i32 % 3) * 5 - 4)).collect()
    }

    #[test]
    fn allreduce_matches_pinned_serial_sum_bitwise_for_any_fanout() {
        for p in [2, 3, 5, 8] {
            let serial = pinned_sum((0..p).map(contribution).collect::<Vec<_>>().iter().map(Vec::as_slice));
            for fanout in [1, 2, 3] {
                let out = run(p, fanout, |c| c.allreduce_sum(&contribution(c.rank())).unwrap());
                for v in out {
                    assert_eq!(
                        v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        serial.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
                    );
                }
            }
        }
    }

    #[test]
    fn three_workers_equal_left_to_right() {
        let out = run(3, 2, |c| c.allreduce_sum(&contribution(c.rank())).unwrap());
        let (a, b, d) = (contribution(0), contribution(1), contribution(2));
        let expect: Vec<f64> = (0..5).map(|i| (a[i] + b[i]) + d[i]).collect();
        assert_eq!(out[1], expect);
    }

    #[test]
    fn broadcast_from_any_root() {
        for root in 0..6 {
            let out = run(6, 2, |c| {
                let v = (c.rank() == root).then(|| vec![root as u8; 3]);
                c.broadcast(v, root).unwrap()
            });
            assert!(out.iter().all(|v| v == &vec![root as u8; 3]));
        }
    }

    #[test]
    fn large_broadcast_integrity() {
        let payload: Vec<u8> = (0..1 << 20).map(|i| (i * 31 % 251) as u8).collect();
        let out = run(8, 2, |c| c.broadcast((c.rank() == 0).then(|| payload.clone()), 0).unwrap());
        assert!(out.iter().all(|v| v == &payload));
    }

    #[test]
    fn gather_then_broadcast_round_trip() {
        let out = run(5, 2, |c| {
            let g = c.gather(vec![c.rank() as u8; c.rank() + 1]).unwrap();
            let flat = g.map(|parts| parts.concat());
            c.broadcast(flat, 0).unwrap()
        });
        let expect: Vec<u8> = (0..5u8).flat_map(|r| vec![r; r as usize + 1]).collect();
        assert!(out.iter().all(|v| v == &expect));
    }

    #[test]
    fn length_mismatch_is_a_protocol_error() {
        let out = run(3, 2, |c| {
            let len = if c.rank() == 2 { 3 } else { 2 };
            c.allreduce_sum(&vec![1.0; len])
        });
        assert!(matches!(out[0], Err(Error::Protocol(_))));
        assert!(out[1].is_err() && out[2].is_err());
    }

    #[test]
    fn barrier_and_shutdown_complete() {
        let out = run(7, 3, |c| {
            c.barrier().unwrap();
            c.shutdown().unwrap();
            c.counters()
        });
        assert!(out.iter().all(|c| c.barriers == 1));
    }

    #[test]
    fn out_of_order_collectives_are_detected() {
        let out = run(2, 2, |c| if c.rank() == 0 { c.barrier() } else { c.allreduce_sum(&[1.0]).map(|_| ()) });
        assert!(out.iter().any(|r| matches!(r, Err(Error::Protocol(_)))));
    }

    #[test]
    fn silent_peer_times_out_naming_the_worker() {
        let topo = TreeTopology::binary(2).unwrap();
        let mut comms = local_mesh(&topo, Duration::from_millis(50));
        let _peer = comms.pop().unwrap();
        let mut root = comms.pop().unwrap();
        match root.allreduce_sum(&[1.0]) {
            Err(Error::Transport { worker: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
