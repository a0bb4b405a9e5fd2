//! Training procedures built on the model, loss, and synchronization
//! primitives.

mod checkpoint;
mod config;
mod engine;
mod metrics;
mod procedures;

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::allreduce::partition;
use crate::data::{Dataset, UtteranceSource};
use crate::error::{Error, Result};
use crate::matrix::argmax;
use crate::model::{posteriors, ClipConfig, Gradients, ModelParams};
use crate::rng::{stream_rng, streams};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SYNC_MAGIC};
pub use config::TrainConfig;
pub use engine::{train_from, train_parallel, Objective, TrainOutput};
pub use metrics::{MetricRow, Metrics, ModelKind, METRICS_CSV_HEADER};
pub use procedures::{
    distill, layerwise_train, subset_indices, transfer_smbr, LayerwiseConfig, LayerwiseOutput,
    StageRecord, TeacherChoice, TransferConfig,
};

/// Momentum buffer of the SGD stepper.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityState {
    pub values: Vec<f64>,
}

impl VelocityState {
    pub fn zeros(len: usize) -> Self {
        VelocityState {
            values: vec![0.0; len],
        }
    }
}

/// `v' = momentum * v + g`, `params' = params - lr * v'`. A skipped gradient
/// leaves both unchanged.
pub fn sgd_momentum_step(
    mut params: ModelParams,
    grads: &Gradients,
    mut velocity: VelocityState,
    lr: f64,
    momentum: f64,
) -> Result<(ModelParams, VelocityState)> {
    let n = params.values().len();
    if grads.values().len() != n || velocity.values.len() != n {
        return Err(Error::contract(format!(
            "sgd step: {n} parameters, {} gradients, {} velocity entries",
            grads.values().len(),
            velocity.values.len()
        )));
    }
    if grads.is_skipped() {
        return Ok((params, velocity));
    }
    for ((p, v), &g) in params
        .values_mut()
        .iter_mut()
        .zip(velocity.values.iter_mut())
        .zip(grads.values())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok((params, velocity))
}

/// Deterministically shuffles `0..len` and cuts it into `workers` disjoint
/// index sets whose sizes differ by at most one.
pub fn partition_indices(len: usize, workers: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if workers == 0 {
        return Err(Error::contract("cannot partition over zero workers"));
    }
    if len < workers {
        return Err(Error::contract(format!(
            "{len} utterances cannot be split over {workers} workers"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, streams::PARTITION));
    let part = partition(len, workers)?;
    Ok(part
        .ranges()
        .iter()
        .map(|r| {
            let mut split = order[r.clone()].to_vec();
            split.sort_unstable();
            split
        })
        .collect())
}

/// Splits a dataset into `workers` non-overlapping parts.
pub fn partition_data(data: &Dataset, workers: usize, seed: u64) -> Result<Vec<Dataset>> {
    Ok(partition_indices(data.utterances.len(), workers, seed)?
        .iter()
        .map(|idx| data.select(idx))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub errors: usize,
    /// Fraction of frames whose argmax posterior differs from the label.
    pub fer: f64,
    /// Frame-averaged cross entropy against the hard labels.
    pub ce_loss: f64,
    /// Mean inference wall-clock per frame, in microseconds.
    pub us_per_frame: f64,
}

/// Frame error rate, cross entropy, and inference time of `model` on `data`.
pub fn evaluate<S: UtteranceSource + ?Sized>(
    model: &ModelParams,
    data: &S,
    clip: &ClipConfig,
) -> Result<EvalReport> {
    let classes = model.layout().num_classes();
    let (mut frames, mut errors, mut nll) = (0usize, 0usize, 0.0);
    let mut elapsed = std::time::Duration::ZERO;
    for i in 0..data.len() {
        let start = Instant::now();
        let post = posteriors(model, data.features(i), clip)?;
        elapsed += start.elapsed();
        for (row, &label) in post.iter_rows().zip(data.labels(i)) {
            if label >= classes {
                return Err(Error::contract(format!(
                    "utterance {} label {label} out of range for {classes} classes",
                    data.id(i)
                )));
            }
            if argmax(row) != label {
                errors += 1;
            }
            nll -= row[label].max(f64::MIN_POSITIVE).ln();
        }
        frames += post.rows();
    }
    let denom = frames.max(1) as f64;
    Ok(EvalReport {
        frames,
        errors,
        fer: errors as f64 / denom,
        ce_loss: nll / denom,
        us_per_frame: elapsed.as_secs_f64() * 1e6 / denom,
    })
}
