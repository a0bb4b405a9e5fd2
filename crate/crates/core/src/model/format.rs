//! Binary model file: magic `DSTM`, format version (u32), layout dimensions
//! as a u32 count followed by `[input_dim, hidden_1 .. hidden_L, num_classes]`,
//! then every parameter as a little-endian IEEE-754 double. All integers are
//! little-endian.

use super::layout::ModelLayout;
use super::params::ModelParams;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"DSTM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn serialize(model: &ModelParams) -> Vec<u8> {
    let layout = model.layout();
    let dims: Vec<u32> = std::iter::once(layout.input_dim())
        .chain(layout.lstm_layers().iter().copied())
        .chain(std::iter::once(layout.num_classes()))
        .map(|d| u32::try_from(d).expect("dimension fits in u32"))
        .collect();
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 8 * model.values().len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in model.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Byte cursor shared by the model and checkpoint readers.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format(format!("{what} length overflows")))?,
            what,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

pub(crate) fn read_model(r: &mut Reader<'_>) -> Result<ModelParams> {
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(Error::Format("bad magic, not a model file".into()));
    }
    let version = r.u32("version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {version}")));
    }
    let n = r.u32("dimension count")? as usize;
    if n < 3 {
        return Err(Error::Format(format!("layout needs at least 3 dimensions, got {n}")));
    }
    let mut dims = Vec::with_capacity(n);
    for _ in 0..n {
        dims.push(r.u32("layout dimension")? as usize);
    }
    let layout = ModelLayout::new(dims[0], dims[1..n - 1].to_vec(), dims[n - 1])
        .map_err(|e| Error::Format(format!("invalid layout: {e}")))?;
    let values = r.f64s(layout.param_count(), "parameters")?;
    ModelParams::new(layout, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn deserialize(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes);
    let model = read_model(&mut r)?;
    if !r.remaining().is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameters",
            r.remaining().len()
        )));
    }
    Ok(model)
}
