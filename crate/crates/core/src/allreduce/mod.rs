//! Decentralized model aggregation over a full mesh of workers.
//!
//! Each worker's vector is cut into `N` contiguous pieces. In the scatter
//! phase worker `j` collects piece `j` from every peer and averages it; in
//! the gather phase it sends the averaged piece back to everyone, so each
//! worker ends with the complete averaged vector. Pieces are summed in
//! ascending worker order, which makes the result bit-identical on every
//! worker and equal to [`crate::sync::model_average`].

mod memory;
mod tcp;
mod wire;

use std::ops::Range;

pub use memory::{memory_mesh, MemoryTransport};
pub use tcp::{local_tcp_mesh, TcpTransport};
pub use wire::{decode_frame, encode_frame, read_frame, write_frame, WIRE_MAGIC};

use crate::error::{Error, Result};
use crate::sync::ordered_mean;

/// Contiguous split of `[0, len)` into `N` ranges; sizes differ by at most
/// one and the earlier ranges take the remainder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    len: usize,
    ranges: Vec<Range<usize>>,
}

impl Partition {
    pub fn workers(&self) -> usize {
        self.ranges.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn range(&self, slot: usize) -> Range<usize> {
        self.ranges[slot].clone()
    }
}

pub fn partition(len: usize, workers: usize) -> Result<Partition> {
    if workers == 0 {
        return Err(Error::contract("cannot partition across zero workers"));
    }
    let base = len / workers;
    let extra = len % workers;
    let mut ranges = Vec::with_capacity(workers);
    let mut start = 0;
    for j in 0..workers {
        let size = base + usize::from(j < extra);
        ranges.push(start..start + size);
        start += size;
    }
    Ok(Partition { len, ranges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Scatter,
    Gather,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Scatter => 0,
            Phase::Gather => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Phase::Scatter),
            1 => Some(Phase::Gather),
            _ => None,
        }
    }
}

/// One piece of a model in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceMessage {
    pub sender: usize,
    pub slot: usize,
    pub phase: Phase,
    pub payload: Vec<f64>,
}

/// Counters of outbound traffic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub messages: u64,
    pub payload_bytes: u64,
}

/// Point-to-point message channel between mesh workers. Delivery must be
/// reliable and ordered for every sender/receiver pair.
pub trait Transport: Send {
    fn send(&mut self, to: usize, msg: PieceMessage) -> Result<()>;
    /// Blocks for the next inbound message; errors on timeout or failure.
    fn receive(&mut self) -> Result<PieceMessage>;
    fn stats(&self) -> TransportStats;
}

/// A worker's attachment to the mesh: its transport plus messages that
/// arrived early for a later round.
pub struct MeshEndpoint<T> {
    transport: T,
    deferred: Vec<PieceMessage>,
}

impl<T: Transport> MeshEndpoint<T> {
    pub fn new(transport: T) -> Self {
        MeshEndpoint {
            transport,
            deferred: Vec::new(),
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn stats(&self) -> TransportStats {
        self.transport.stats()
    }
}

struct Round<'a> {
    me: usize,
    part: &'a Partition,
    scatter: Vec<Option<Vec<f64>>>,
    gather: Vec<Option<Vec<f64>>>,
}

impl Round<'_> {
    /// Files `msg` into this round, or hands it back when its slot is taken
    /// (it then belongs to a later round).
    fn place(&mut self, msg: PieceMessage) -> Result<Option<PieceMessage>> {
        let n = self.part.workers();
        if msg.sender >= n || msg.sender == self.me {
            return Err(Error::Aggregation(format!("message from invalid sender {}", msg.sender)));
        }
        let (expected_slot, store) = match msg.phase {
            Phase::Scatter => (self.me, &mut self.scatter),
            Phase::Gather => (msg.sender, &mut self.gather),
        };
        if msg.slot != expected_slot {
            return Err(Error::Aggregation(format!(
                "{:?} message from {} carries slot {}, expected {expected_slot}",
                msg.phase, msg.sender, msg.slot
            )));
        }
        if msg.payload.len() != self.part.range(msg.slot).len() {
            return Err(Error::Aggregation(format!(
                "piece {} has {} values, expected {}",
                msg.slot,
                msg.payload.len(),
                self.part.range(msg.slot).len()
            )));
        }
        let cell = &mut store[msg.sender];
        if cell.is_some() {
            return Ok(Some(msg));
        }
        *cell = Some(msg.payload);
        Ok(None)
    }
}

/// Receives until every piece of `phase` is present for this round.
fn fill<T: Transport>(
    round: &mut Round<'_>,
    endpoint: &mut MeshEndpoint<T>,
    early: &mut Vec<PieceMessage>,
    phase: Phase,
) -> Result<()> {
    loop {
        let store = match phase {
            Phase::Scatter => &round.scatter,
            Phase::Gather => &round.gather,
        };
        if store.iter().all(Option::is_some) {
            return Ok(());
        }
        let msg = endpoint.transport.receive()?;
        if let Some(m) = round.place(msg)? {
            early.push(m);
        }
    }
}

/// Averages `local` with every other worker's vector. All `N` workers must
/// call this concurrently with equal-length vectors; each gets the same
/// result.
pub fn mesh_allreduce<T: Transport>(
    local: &[f64],
    me: usize,
    part: &Partition,
    endpoint: &mut MeshEndpoint<T>,
) -> Result<Vec<f64>> {
    let n = part.workers();
    if local.len() != part.len() {
        return Err(Error::contract(format!(
            "local vector has {} values, partition covers {}",
            local.len(),
            part.len()
        )));
    }
    if me >= n {
        return Err(Error::contract(format!("worker {me} outside mesh of {n}")));
    }
    if n == 1 {
        return Ok(local.to_vec());
    }

    for j in (0..n).filter(|&j| j != me) {
        endpoint.transport.send(
            j,
            PieceMessage {
                sender: me,
                slot: j,
                phase: Phase::Scatter,
                payload: local[part.range(j)].to_vec(),
            },
        )?;
    }

    let mut round = Round {
        me,
        part,
        scatter: vec![None; n],
        gather: vec![None; n],
    };
    round.scatter[me] = Some(local[part.range(me)].to_vec());

    let mut still_early = Vec::new();
    for msg in std::mem::take(&mut endpoint.deferred) {
        if let Some(m) = round.place(msg)? {
            still_early.push(m);
        }
    }

    fill(&mut round, endpoint, &mut still_early, Phase::Scatter)?;
    let reduced = ordered_mean(
        round.scatter.iter().map(|p| p.as_deref().expect("all pieces present")),
        n,
    );

    for j in (0..n).filter(|&j| j != me) {
        endpoint.transport.send(
            j,
            PieceMessage {
                sender: me,
                slot: me,
                phase: Phase::Gather,
                payload: reduced.clone(),
            },
        )?;
    }
    round.gather[me] = Some(reduced);
    fill(&mut round, endpoint, &mut still_early, Phase::Gather)?;
    endpoint.deferred = still_early;

    let mut out = Vec::with_capacity(part.len());
    for piece in round.gather {
        out.extend(piece.expect("all pieces present"));
    }
    Ok(out)
}
