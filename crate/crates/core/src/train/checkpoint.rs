//! Checkpoint file: a model file followed by a synchronization-state
//! appendix.
//!
//! Appendix layout (little-endian): magic `SYNC`, u32 version, u8 flags
//! (bit 0 BMUF, bit 1 MA, bit 2 EMA), then for each present state in that
//! order: BMUF as `eta, zeta` (f64) and the `theta_g`, `delta` vectors; MA
//! as a u64 count and the mean vector; EMA as `alpha` and the averaged
//! vector. Every vector has the model's parameter count.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{read_model, serialize, ModelParams, Reader};
use crate::sync::{BmufState, EmaState, MaState};

pub const CHECKPOINT_SYNC_MAGIC: &[u8; 4] = b"SYNC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub bmuf: Option<BmufState>,
    pub ma: Option<MaState>,
    pub ema: Option<EmaState>,
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.model.values().len();
        let check = |len: usize, what: &str| {
            if len == n {
                Ok(())
            } else {
                Err(Error::contract(format!("{what} has {len} values, model has {n}")))
            }
        };
        let mut out = serialize(&self.model);
        out.extend_from_slice(CHECKPOINT_SYNC_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let flags = u8::from(self.bmuf.is_some())
            | u8::from(self.ma.is_some()) << 1
            | u8::from(self.ema.is_some()) << 2;
        out.push(flags);
        if let Some(b) = &self.bmuf {
            check(b.theta_g.len(), "BMUF theta_g")?;
            check(b.delta.len(), "BMUF delta")?;
            out.extend_from_slice(&b.eta.to_le_bytes());
            out.extend_from_slice(&b.zeta.to_le_bytes());
            put_vec(&mut out, &b.theta_g);
            put_vec(&mut out, &b.delta);
        }
        if let Some(m) = &self.ma {
            let mean = if m.count == 0 { vec![0.0; n] } else { m.mean.clone() };
            check(mean.len(), "MA mean")?;
            out.extend_from_slice(&m.count.to_le_bytes());
            put_vec(&mut out, &mean);
        }
        if let Some(e) = &self.ema {
            check(e.len(), "EMA vector")?;
            out.extend_from_slice(&e.alpha().to_le_bytes());
            put_vec(&mut out, &e.export());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let model = read_model(&mut r)?;
        let n = model.values().len();
        if r.take(4, "sync appendix magic")? != CHECKPOINT_SYNC_MAGIC {
            return Err(Error::Format("missing sync-state appendix".into()));
        }
        let version = r.u32("appendix version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported appendix version {version}")));
        }
        let flags = r.u8("appendix flags")?;
        if flags & !0b111 != 0 {
            return Err(Error::Format(format!("unknown appendix flags {flags:#x}")));
        }
        let bmuf = if flags & 1 != 0 {
            let eta = r.f64("BMUF eta")?;
            let zeta = r.f64("BMUF zeta")?;
            let theta_g = r.f64s(n, "BMUF theta_g")?;
            let delta = r.f64s(n, "BMUF delta")?;
            let mut state =
                BmufState::new(theta_g, eta, zeta).map_err(|e| Error::Format(e.to_string()))?;
            state.delta = delta;
            Some(state)
        } else {
            None
        };
        let ma = if flags & 2 != 0 {
            let count = r.u64("MA count")?;
            let mean = r.f64s(n, "MA mean")?;
            Some(MaState {
                mean: if count == 0 { Vec::new() } else { mean },
                count,
            })
        } else {
            None
        };
        let ema = if flags & 4 != 0 {
            let alpha = r.f64("EMA alpha")?;
            let theta = r.f64s(n, "EMA vector")?;
            Some(EmaState::new(theta, alpha).map_err(|e| Error::Format(e.to_string()))?)
        } else {
            None
        };
        if !r.remaining().is_empty() {
            return Err(Error::Format("trailing bytes after sync appendix".into()));
        }
        Ok(Checkpoint {
            model,
            bmuf,
            ma,
            ema,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{xavier_init, ModelLayout};
    use crate::sync::{bmuf_step, ema_update, ma_update};

    #[test]
    fn round_trip_with_all_states() {
        let model = xavier_init(&ModelLayout::uniform(2, 3, 1, 2).unwrap(), 4);
        let v = model.values().to_vec();
        let shifted: Vec<f64> = v.iter().map(|x| x + 0.25).collect();
        let bmuf = bmuf_step(BmufState::new(v.clone(), 0.9, 1.0).unwrap(), &shifted).unwrap();
        let ma = ma_update(ma_update(MaState::default(), &v).unwrap(), &shifted).unwrap();
        let ema = ema_update(EmaState::new(v.clone(), 0.99).unwrap(), &shifted).unwrap();
        let ckpt = Checkpoint {
            model: model.clone(),
            bmuf: Some(bmuf),
            ma: Some(ma),
            ema: Some(ema),
        };
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let bare = Checkpoint {
            model,
            bmuf: None,
            ma: None,
            ema: None,
        };
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes().unwrap()).unwrap(), bare);
    }

    #[test]
    fn plain_model_file_is_not_a_checkpoint() {
        let model = xavier_init(&ModelLayout::uniform(2, 3, 1, 2).unwrap(), 4);
        assert!(matches!(
            Checkpoint::from_bytes(&serialize(&model)),
            Err(Error::Format(_))
        ));
    }
}
