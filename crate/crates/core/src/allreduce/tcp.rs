use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{read_frame, write_frame};
use super::{PieceMessage, Transport, TransportStats};
use crate::error::{Error, Result};

/// Socket transport using the `MARD` framing. Every worker keeps one
/// outbound stream per peer; inbound streams are drained by reader threads
/// into a single inbox.
pub struct TcpTransport {
    me: usize,
    outgoing: Vec<Option<TcpStream>>,
    inbox: Receiver<Result<PieceMessage>>,
    timeout: Duration,
    stats: TransportStats,
}

fn spawn_reader(mut stream: TcpStream, tx: Sender<Result<PieceMessage>>) {
    thread::spawn(move || loop {
        match read_frame(&mut stream) {
            Ok(Some(msg)) => {
                if tx.send(Ok(msg)).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    });
}

impl TcpTransport {
    /// Joins the mesh as worker `me`. `peers[j]` is worker `j`'s listening
    /// address (`peers[me]` is `listener`'s own). Connection attempts retry
    /// until `timeout`.
    pub fn connect(
        me: usize,
        listener: TcpListener,
        peers: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self> {
        let n = peers.len();
        if me >= n {
            return Err(Error::contract(format!("worker {me} outside mesh of {n}")));
        }
        let (tx, inbox) = channel();
        thread::spawn(move || {
            for _ in 0..n.saturating_sub(1) {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let mut hello = [0u8; 4];
                if stream.read_exact(&mut hello).is_err() {
                    continue;
                }
                spawn_reader(stream, tx.clone());
            }
        });

        let deadline = Instant::now() + timeout;
        let mut outgoing: Vec<Option<TcpStream>> = (0..n).map(|_| None).collect();
        for (j, addr) in peers.iter().enumerate() {
            if j == me {
                continue;
            }
            let mut stream = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(Error::Aggregation(format!("connect to worker {j}: {e}")))
                    }
                    Err(_) => thread::sleep(Duration::from_millis(10)),
                }
            };
            stream.set_nodelay(true)?;
            stream.write_all(&(me as u32).to_le_bytes())?;
            outgoing[j] = Some(stream);
        }
        Ok(TcpTransport {
            me,
            outgoing,
            inbox,
            timeout,
            stats: TransportStats::default(),
        })
    }
}

/// `n` workers meshed over loopback sockets within this process.
pub fn local_tcp_mesh(n: usize, timeout: Duration) -> Result<Vec<TcpTransport>> {
    let listeners = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<Vec<_>>>()?;
    let addrs = listeners
        .iter()
        .map(TcpListener::local_addr)
        .collect::<std::io::Result<Vec<_>>>()?;
    listeners
        .into_iter()
        .enumerate()
        .map(|(me, l)| TcpTransport::connect(me, l, &addrs, timeout))
        .collect()
}

impl Transport for TcpTransport {
    fn send(&mut self, to: usize, msg: PieceMessage) -> Result<()> {
        let stream = self
            .outgoing
            .get_mut(to)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::Aggregation(format!("no connection to worker {to}")))?;
        write_frame(stream, &msg)
            .map_err(|e| Error::Aggregation(format!("send to worker {to}: {e}")))?;
        self.stats.messages += 1;
        self.stats.payload_bytes += 8 * msg.payload.len() as u64;
        Ok(())
    }

    fn receive(&mut self) -> Result<PieceMessage> {
        match self.inbox.recv_timeout(self.timeout) {
            Ok(msg) => msg,
            Err(RecvTimeoutError::Timeout) => Err(Error::Aggregation(format!(
                "worker {} timed out after {:?} waiting for peers",
                self.me, self.timeout
            ))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Aggregation(format!(
                "worker {}: all peer connections closed",
                self.me
            ))),
        }
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}
