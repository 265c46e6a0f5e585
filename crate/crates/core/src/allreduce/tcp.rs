//! TCP transport. Each worker listens on its own address; children dial
//! their parent and introduce themselves with a round-0 BARRIER frame whose
//! payload is the child's rank.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use super::frame::{Frame, OpCode};
use super::topology::TreeTopology;
use super::{Communicator, Transport};
use crate::error::{Error, Result};

pub struct TcpTransport {
    streams: HashMap<usize, TcpStream>,
}

impl Transport for TcpTransport {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()> {
        let stream = self
            .streams
            .get_mut(&to)
            .ok_or_else(|| Error::Transport { worker: to, msg: "no connection to this worker".into() })?;
        frame.write_to(stream).map_err(|e| Error::Transport { worker: to, msg: e.to_string() })
    }

    fn recv(&mut self, from: usize) -> Result<Frame> {
        let stream = self
            .streams
            .get_mut(&from)
            .ok_or_else(|| Error::Transport { worker: from, msg: "no connection to this worker".into() })?;
        Frame::read_from(stream).map_err(|e| match e {
            Error::Protocol(msg) => Error::Protocol(format!("from worker {from}: {msg}")),
            other => Error::Transport { worker: from, msg: other.to_string() },
        })
    }
}

/// Reads a hosts file: one `host:port` per line, line `k` is worker `k`.
pub fn read_hosts(path: impl AsRef<Path>) -> Result<Vec<SocketAddr>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let addr = std::net::ToSocketAddrs::to_socket_addrs(line)
            .ok()
            .and_then(|mut a| a.next())
            .ok_or_else(|| Error::Config(format!("hosts file line {}: cannot resolve `{line}`", i + 1)))?;
        out.push(addr);
    }
    Ok(out)
}

fn transport_err(worker: usize, e: impl ToString) -> Error {
    Error::Transport { worker, msg: e.to_string() }
}

/// Connects worker `rank` to its tree neighbours. `listener` must already be
/// bound to `addrs[rank]`.
pub fn connect(
    rank: usize,
    addrs: &[SocketAddr],
    topo: &TreeTopology,
    listener: TcpListener,
    timeout: Duration,
) -> Result<Communicator<TcpTransport>> {
    if addrs.len() != topo.size() {
        return Err(Error::Config(format!("{} addresses for {} workers", addrs.len(), topo.size())));
    }
    let deadline = Instant::now() + timeout;
    let mut streams = HashMap::new();

    if let Some(parent) = topo.parent(rank) {
        let mut stream = loop {
            match TcpStream::connect_timeout(&addrs[parent], Duration::from_millis(500)) {
                Ok(s) => break s,
                Err(e) if Instant::now() >= deadline => return Err(transport_err(parent, e)),
                Err(_) => thread::sleep(Duration::from_millis(50)),
            }
        };
        stream.set_nodelay(true)?;
        Frame::new(OpCode::Barrier, 0, (rank as u64).to_le_bytes().to_vec())
            .write_to(&mut stream)
            .map_err(|e| transport_err(parent, e))?;
        streams.insert(parent, stream);
    }

    let expected = topo.children(rank);
    listener.set_nonblocking(true)?;
    while streams.len() < expected.len() + usize::from(topo.parent(rank).is_some()) {
        match listener.accept() {
            Ok((mut stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                stream.set_read_timeout(Some(timeout))?;
                let hello = Frame::read_from(&mut stream)?;
                let child = match hello.payload.as_slice().try_into() {
                    Ok(b) if hello.op == OpCode::Barrier && hello.round == 0 => u64::from_le_bytes(b) as usize,
                    _ => return Err(Error::Protocol("malformed handshake".into())),
                };
                if !expected.contains(&child) || streams.contains_key(&child) {
                    return Err(Error::Protocol(format!("unexpected handshake from worker {child}")));
                }
                streams.insert(child, stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let missing = expected.iter().find(|c| !streams.contains_key(c)).copied().unwrap_or(rank);
                    return Err(transport_err(missing, "did not connect before the deadline"));
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(e.into()),
        }
    }
    for s in streams.values() {
        s.set_read_timeout(Some(timeout))?;
    }
    Ok(Communicator::new(rank, topo.clone(), TcpTransport { streams }))
}
