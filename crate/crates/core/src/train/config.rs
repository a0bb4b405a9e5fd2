use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ClipConfig, ModelLayout};
use crate::sync::SyncStrategy;

/// Hyper-parameters of one data-parallel training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub layout: ModelLayout,
    #[serde(default = "defaults::workers")]
    pub workers: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Utterances per mini-batch.
    #[serde(default = "defaults::mini_batch")]
    pub mini_batch: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    /// Mini-batches between synchronizations; every epoch also ends with one.
    #[serde(default = "defaults::sync_period")]
    pub sync_period: usize,
    #[serde(default)]
    pub sync: SyncStrategy,
    /// EMA rate, or `null` to disable EMA tracking.
    #[serde(default = "defaults::ema_alpha")]
    pub ema_alpha: Option<f64>,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default = "defaults::loss")]
    pub loss: LossConfig,
    #[serde(default)]
    pub seed: u64,
    /// Halve the learning rate after an epoch without validation improvement.
    #[serde(default = "defaults::lr_halving")]
    pub lr_halving: bool,
    /// Synchronizations between metric rows; 0 records rows at epoch ends only.
    #[serde(default)]
    pub eval_interval: usize,
    /// How long a worker waits for a peer during allreduce.
    #[serde(default = "defaults::timeout_ms")]
    pub timeout_ms: u64,
}

mod defaults {
    use crate::losses::LossConfig;

    pub fn workers() -> usize {
        8
    }
    pub fn epochs() -> usize {
        4
    }
    pub fn mini_batch() -> usize {
        8
    }
    pub fn learning_rate() -> f64 {
        0.03
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn sync_period() -> usize {
        4
    }
    pub fn ema_alpha() -> Option<f64> {
        Some(0.99)
    }
    pub fn loss() -> LossConfig {
        LossConfig::HARD_ONLY
    }
    pub fn lr_halving() -> bool {
        true
    }
    pub fn timeout_ms() -> u64 {
        60_000
    }
}

impl TrainConfig {
    /// Defaults for everything but the layout.
    pub fn new(layout: ModelLayout) -> Self {
        TrainConfig {
            layout,
            workers: defaults::workers(),
            epochs: defaults::epochs(),
            mini_batch: defaults::mini_batch(),
            learning_rate: defaults::learning_rate(),
            momentum: defaults::momentum(),
            sync_period: defaults::sync_period(),
            sync: SyncStrategy::default(),
            ema_alpha: defaults::ema_alpha(),
            clip: ClipConfig::default(),
            loss: defaults::loss(),
            seed: 0,
            lr_halving: defaults::lr_halving(),
            eval_interval: 0,
            timeout_ms: defaults::timeout_ms(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("workers", self.workers),
            ("epochs", self.epochs),
            ("mini_batch", self.mini_batch),
            ("sync_period", self.sync_period),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if let Some(a) = self.ema_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("ema_alpha", "must lie in [0, 1]"));
            }
        }
        if self.timeout_ms == 0 {
            return Err(Error::config("timeout_ms", "must be positive"));
        }
        self.sync.validate()?;
        self.clip.validate()?;
        self.loss.validate()
    }
}
