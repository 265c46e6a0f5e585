//! In-process transport: one thread per worker, channels along tree edges.

use std::collections::HashMap;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::frame::Frame;
use super::topology::TreeTopology;
use super::{Communicator, Transport};
use crate::error::{Error, Result};

pub struct LocalTransport {
    senders: HashMap<usize, Sender<Frame>>,
    receivers: HashMap<usize, Receiver<Frame>>,
    timeout: Duration,
}

impl Transport for LocalTransport {
    fn send(&mut self, to: usize, frame: Frame) -> Result<()> {
        let tx = self
            .senders
            .get(&to)
            .ok_or_else(|| Error::Transport { worker: to, msg: "no link to this worker".into() })?;
        tx.send(frame).map_err(|_| Error::Transport { worker: to, msg: "peer hung up".into() })
    }

    fn recv(&mut self, from: usize) -> Result<Frame> {
        let rx = self
            .receivers
            .get(&from)
            .ok_or_else(|| Error::Transport { worker: from, msg: "no link to this worker".into() })?;
        rx.recv_timeout(self.timeout).map_err(|e| Error::Transport {
            worker: from,
            msg: match e {
                RecvTimeoutError::Timeout => format!("timed out after {:?}", self.timeout),
                RecvTimeoutError::Disconnected => "peer hung up".into(),
            },
        })
    }
}

/// One communicator per worker, wired along the edges of `topo`. Move each
/// into its own thread.
pub fn local_mesh(topo: &TreeTopology, timeout: Duration) -> Vec<Communicator<LocalTransport>> {
    let p = topo.size();
    let mut transports: Vec<LocalTransport> = (0..p)
        .map(|_| LocalTransport { senders: HashMap::new(), receivers: HashMap::new(), timeout })
        .collect();
    for child in 0..p {
        if let Some(parent) = topo.parent(child) {
            let (tx, rx) = channel();
            transports[child].senders.insert(parent, tx);
            transports[parent].receivers.insert(child, rx);
            let (tx, rx) = channel();
            transports[parent].senders.insert(child, tx);
            transports[child].receivers.insert(parent, rx);
        }
    }
    transports
        .into_iter()
        .enumerate()
        .map(|(rank, t)| Communicator::new(rank, topo.clone(), t))
        .collect()
}
