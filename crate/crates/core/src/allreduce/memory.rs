use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{PieceMessage, Transport, TransportStats};
use crate::error::{Error, Result};

/// In-process transport over channels; one inbox per worker.
pub struct MemoryTransport {
    me: usize,
    inbox: Receiver<PieceMessage>,
    peers: Vec<Sender<PieceMessage>>,
    timeout: Duration,
    stats: TransportStats,
}

/// Fully connected in-process mesh of `n` workers. `timeout` bounds every
/// blocking receive.
pub fn memory_mesh(n: usize, timeout: Duration) -> Vec<MemoryTransport> {
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| channel()).unzip();
    receivers
        .into_iter()
        .enumerate()
        .map(|(me, inbox)| MemoryTransport {
            me,
            inbox,
            peers: senders.clone(),
            timeout,
            stats: TransportStats::default(),
        })
        .collect()
}

impl MemoryTransport {
    pub fn id(&self) -> usize {
        self.me
    }

    /// Non-blocking receive, used by test harnesses that reorder delivery.
    pub fn try_receive(&mut self) -> Option<PieceMessage> {
        self.inbox.try_recv().ok()
    }
}

impl Transport for MemoryTransport {
    fn send(&mut self, to: usize, msg: PieceMessage) -> Result<()> {
        let peer = self
            .peers
            .get(to)
            .ok_or_else(|| Error::Aggregation(format!("no worker {to} in mesh")))?;
        let bytes = 8 * msg.payload.len() as u64;
        peer.send(msg)
            .map_err(|_| Error::Aggregation(format!("worker {to} has left the mesh")))?;
        self.stats.messages += 1;
        self.stats.payload_bytes += bytes;
        Ok(())
    }

    fn receive(&mut self) -> Result<PieceMessage> {
        self.inbox.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Aggregation(format!(
                "worker {} timed out after {:?} waiting for peers",
                self.me, self.timeout
            )),
            RecvTimeoutError::Disconnected => {
                Error::Aggregation(format!("worker {}: all peers disconnected", self.me))
            }
        })
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}
