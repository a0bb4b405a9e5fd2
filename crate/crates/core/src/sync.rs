//! Aggregation rules applied at synchronization barriers. Each operation
//! takes a state by value and returns the successor state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// How worker models are merged into the global model at each barrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyncStrategy {
    /// The global model is the plain average of the workers.
    ModelAverage,
    /// Blockwise model-update filtering with block momentum `eta` and block
    /// learning rate `zeta`.
    Bmuf { eta: f64, zeta: f64 },
}

impl Default for SyncStrategy {
    fn default() -> Self {
        SyncStrategy::Bmuf {
            eta: 0.9,
            zeta: 1.0,
        }
    }
}

impl SyncStrategy {
    pub fn validate(&self) -> Result<()> {
        if let SyncStrategy::Bmuf { eta, zeta } = *self {
            check_bmuf_params(eta, zeta)?;
        }
        Ok(())
    }
}

fn check_bmuf_params(eta: f64, zeta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::config("sync.eta", "block momentum must lie in [0, 1)"));
    }
    if !(zeta > 0.0) || !zeta.is_finite() {
        return Err(Error::config("sync.zeta", "block learning rate must be positive"));
    }
    Ok(())
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::contract(format!(
            "{what}: expected length {expected}, got {got}"
        )));
    }
    Ok(())
}

/// Sums `pieces` in the given order, then divides by their count.
pub(crate) fn ordered_mean<'a>(mut pieces: impl Iterator<Item = &'a [f64]>, n: usize) -> Vec<f64> {
    let mut acc = pieces.next().map(<[f64]>::to_vec).unwrap_or_default();
    for p in pieces {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    let n = n as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Element-wise mean of equal-length vectors, summed in slice order.
pub fn model_average(models: &[&[f64]]) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::contract("model average of zero models"))?;
    for m in models {
        check_len(first.len(), m.len(), "model average")?;
    }
    Ok(ordered_mean(models.iter().copied(), models.len()))
}

/// [`model_average`] over full models; layouts must match.
pub fn model_average_params(models: &[ModelParams]) -> Result<Vec<f64>> {
    if let Some(first) = models.first() {
        if models.iter().any(|m| m.layout() != first.layout()) {
            return Err(Error::contract("model average over mismatched layouts"));
        }
    }
    let slices: Vec<&[f64]> = models.iter().map(ModelParams::values).collect();
    model_average(&slices)
}

/// Global model and its filtered update.
#[derive(Debug, Clone, PartialEq)]
pub struct BmufState {
    pub theta_g: Vec<f64>,
    pub delta: Vec<f64>,
    pub eta: f64,
    pub zeta: f64,
}

impl BmufState {
    /// Starts from `theta_g` with a zero update.
    pub fn new(theta_g: Vec<f64>, eta: f64, zeta: f64) -> Result<Self> {
        check_bmuf_params(eta, zeta)?;
        let delta = vec![0.0; theta_g.len()];
        Ok(BmufState {
            theta_g,
            delta,
            eta,
            zeta,
        })
    }
}

/// One BMUF update from the averaged worker model `theta_bar`:
///
/// ```text
/// G      = theta_bar - theta_g
/// delta' = eta * delta + zeta * G
/// theta' = theta_g + delta'
/// ```
///
/// `theta'` is evaluated as `theta_bar + (eta * delta + (zeta - 1) * G)`,
/// which is the same quantity but collapses to exactly `theta_bar` (sign of
/// zero included) when `eta = 0, zeta = 1`.
pub fn bmuf_step(state: BmufState, theta_bar: &[f64]) -> Result<BmufState> {
    check_len(state.theta_g.len(), theta_bar.len(), "bmuf step")?;
    let BmufState {
        mut theta_g,
        mut delta,
        eta,
        zeta,
    } = state;
    for ((g, d), &bar) in theta_g.iter_mut().zip(delta.iter_mut()).zip(theta_bar) {
        let update = bar - *g;
        let carry = eta * *d;
        *d = carry + zeta * update;
        let adjust = carry + (zeta - 1.0) * update;
        *g = if adjust == 0.0 { bar } else { bar + adjust };
    }
    Ok(BmufState {
        theta_g,
        delta,
        eta,
        zeta,
    })
}

/// Running arithmetic mean of the global models seen so far.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaState {
    pub mean: Vec<f64>,
    pub count: u64,
}

pub fn ma_update(state: MaState, theta_g: &[f64]) -> Result<MaState> {
    if state.count == 0 {
        return Ok(MaState {
            mean: theta_g.to_vec(),
            count: 1,
        });
    }
    check_len(state.mean.len(), theta_g.len(), "moving average update")?;
    let count = state.count + 1;
    let inv = 1.0 / count as f64;
    let mut mean = state.mean;
    mean.iter_mut()
        .zip(theta_g)
        .for_each(|(m, &x)| *m += (x - *m) * inv);
    Ok(MaState { mean, count })
}

/// Exponential moving average of the global model. The averaged vector is
/// kept private: trainers can feed it but cannot read it back, only
/// [`EmaState::export`] (for checkpoints and the final model) exposes it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    theta_hat: Vec<f64>,
    alpha: f64,
}

impl EmaState {
    pub fn new(theta_hat: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("ema_alpha", "must lie in [0, 1]"));
        }
        if theta_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("EMA vector is not finite".into()));
        }
        Ok(EmaState { theta_hat, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_hat.is_empty()
    }

    /// Copy of the averaged parameters.
    pub fn export(&self) -> Vec<f64> {
        self.theta_hat.clone()
    }
}

/// `theta_hat' = alpha * theta_hat + (1 - alpha) * theta_g`.
pub fn ema_update(state: EmaState, theta_g: &[f64]) -> Result<EmaState> {
    check_len(state.theta_hat.len(), theta_g.len(), "EMA update")?;
    let alpha = state.alpha;
    let mut theta_hat = state.theta_hat;
    theta_hat
        .iter_mut()
        .zip(theta_g)
        .for_each(|(h, &x)| *h = alpha * *h + (1.0 - alpha) * x);
    Ok(EmaState { theta_hat, alpha })
}
