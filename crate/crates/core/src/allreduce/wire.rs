//! Socket framing: magic `MARD`, u8 phase (0 scatter, 1 gather), u32
//! sender, u32 slot, u64 payload length in values, then the payload as
//! little-endian doubles.

use std::io::{self, Read, Write};

use super::{Phase, PieceMessage};
use crate::error::{Error, Result};

pub const WIRE_MAGIC: &[u8; 4] = b"MARD";
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 8;

pub fn encode_frame(msg: &PieceMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * msg.payload.len());
    out.extend_from_slice(WIRE_MAGIC);
    out.push(msg.phase.code());
    out.extend_from_slice(&(msg.sender as u32).to_le_bytes());
    out.extend_from_slice(&(msg.slot as u32).to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u64).to_le_bytes());
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(Phase, usize, usize, usize)> {
    if &h[..4] != WIRE_MAGIC {
        return Err(Error::Format("bad frame magic".into()));
    }
    let phase = Phase::from_code(h[4])
        .ok_or_else(|| Error::Format(format!("unknown phase code {}", h[4])))?;
    let sender = u32::from_le_bytes(h[5..9].try_into().unwrap()) as usize;
    let slot = u32::from_le_bytes(h[9..13].try_into().unwrap()) as usize;
    let len = u64::from_le_bytes(h[13..21].try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Format("payload too large".into()))?;
    Ok((phase, sender, slot, len))
}

fn payload_from(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn decode_frame(bytes: &[u8]) -> Result<PieceMessage> {
    let header: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| Error::Format("truncated frame header".into()))?;
    let (phase, sender, slot, len) = parse_header(header)?;
    let body = &bytes[HEADER_LEN..];
    if Some(body.len()) != len.checked_mul(8) {
        return Err(Error::Format(format!(
            "frame declares {len} values but carries {} bytes",
            body.len()
        )));
    }
    Ok(PieceMessage {
        sender,
        slot,
        phase,
        payload: payload_from(body),
    })
}

pub fn write_frame<W: Write>(w: &mut W, msg: &PieceMessage) -> io::Result<()> {
    w.write_all(&encode_frame(msg))?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<PieceMessage>> {
    let mut header = [0u8; HEADER_LEN];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let (phase, sender, slot, len) = parse_header(&header)?;
    let byte_len = len
        .checked_mul(8)
        .ok_or_else(|| Error::Format("payload too large".into()))?;
    let mut body = vec![0u8; byte_len];
    r.read_exact(&mut body)
        .map_err(|_| Error::Format("truncated frame payload".into()))?;
    Ok(Some(PieceMessage {
        sender,
        slot,
        phase,
        payload: payload_from(&body),
    }))
}
