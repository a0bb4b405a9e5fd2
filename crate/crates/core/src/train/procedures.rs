//! Layer-wise deepening, distillation, and sMBR transfer built on the
//! parallel trainer.

use log::{info, warn};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::engine::{train_from, Objective, TrainOutput};
use super::metrics::Metrics;
use crate::data::{make_lattices, SubsetView, UtteranceSource};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::matrix::Matrix;
use crate::model::{deepen, posteriors, xavier_init, ClipConfig, ModelLayout, ModelParams};
use crate::rng::{stream_rng, streams};
use crate::smbr::{Lattice, SmbrConfig};

/// Sorted random selection of `round(fraction * len)` indices, never fewer
/// than `min` (or `len` if smaller).
pub fn subset_indices(len: usize, fraction: f64, min: usize, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("subset_fraction", "must lie in (0, 1]"));
    }
    let take = ((fraction * len as f64).round() as usize).max(min).min(len);
    let mut idx = sample(&mut stream_rng(seed, streams::SUBSET), len, take).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn teacher_posteriors<S: UtteranceSource + ?Sized>(
    teacher: &ModelParams,
    data: &S,
    clip: &ClipConfig,
) -> Result<Vec<Matrix>> {
    (0..data.len())
        .map(|i| posteriors(teacher, data.features(i), clip))
        .collect()
}

/// sMBR fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// The layout field is ignored; the base model's layout is kept.
    pub train: TrainConfig,
    #[serde(default = "one")]
    pub subset_fraction: f64,
    /// Multiplier on `train.learning_rate`.
    #[serde(default = "tenth")]
    pub lr_scale: f64,
    #[serde(default)]
    pub smbr: SmbrConfig,
}

fn one() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

impl TransferConfig {
    pub fn new(train: TrainConfig) -> Self {
        TransferConfig {
            train,
            subset_fraction: 1.0,
            lr_scale: 0.1,
            smbr: SmbrConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::config("subset_fraction", "must lie in (0, 1]"));
        }
        if !(self.lr_scale > 0.0) || !self.lr_scale.is_finite() {
            return Err(Error::config("lr_scale", "must be positive"));
        }
        self.smbr.validate()
    }
}

/// Adapts `base` by gradient ascent on the sMBR expected accuracy of
/// `lattices` (one per utterance of `train`), using a random
/// `subset_fraction` of the utterances.
pub fn transfer_smbr<S, V>(
    base: &ModelParams,
    train: &S,
    lattices: &[Lattice],
    valid: &V,
    cfg: &TransferConfig,
) -> Result<TrainOutput>
where
    S: UtteranceSource + ?Sized,
    V: UtteranceSource + ?Sized,
{
    cfg.validate()?;
    if lattices.len() != train.len() {
        return Err(Error::contract(format!(
            "{} lattices for {} utterances",
            lattices.len(),
            train.len()
        )));
    }
    let classes = base.layout().num_classes();
    if let Some(bad) = lattices
        .iter()
        .flat_map(|l| l.frames().iter().flatten())
        .find(|a| a.state >= classes)
    {
        return Err(Error::contract(format!(
            "lattice state {} outside the model's {classes} classes",
            bad.state
        )));
    }
    let idx = subset_indices(train.len(), cfg.subset_fraction, cfg.train.workers, cfg.train.seed)?;
    let chosen: Vec<Lattice> = idx.iter().map(|&i| lattices[i].clone()).collect();
    let view = SubsetView::new(train, idx)?;
    let mut run = cfg.train.clone();
    run.layout = base.layout().clone();
    run.learning_rate *= cfg.lr_scale;
    info!(
        "sMBR fine-tuning on {} of {} utterances, lr {}",
        view.len(),
        train.len(),
        run.learning_rate
    );
    train_from(
        &run,
        base.clone(),
        &view,
        Objective::Smbr {
            lattices: &chosen,
            config: cfg.smbr,
        },
        valid,
        false,
    )
}

/// Trains a student from Xavier initialization on the teacher's posteriors
/// alone. Hard labels of `train` are never read.
pub fn distill<S, V>(
    teacher: &ModelParams,
    student: &ModelLayout,
    train: &S,
    valid: &V,
    cfg: &TrainConfig,
) -> Result<TrainOutput>
where
    S: UtteranceSource + ?Sized,
    V: UtteranceSource + ?Sized,
{
    let t = teacher.layout();
    if t.input_dim() != student.input_dim() || t.num_classes() != student.num_classes() {
        return Err(Error::contract("student and teacher disagree on input or class count"));
    }
    if student.num_layers() >= t.num_layers() {
        warn!(
            "student has {} layers, teacher {}; distillation usually targets a shallower student",
            student.num_layers(),
            t.num_layers()
        );
    }
    let mut run = cfg.clone();
    run.layout = student.clone();
    run.loss = LossConfig::soft_only(cfg.loss.temperature);
    run.validate()?;
    let soft = teacher_posteriors(teacher, train, &run.clip)?;
    train_from(
        &run,
        xavier_init(student, run.seed),
        train,
        Objective::Frame { soft: Some(&soft) },
        valid,
        false,
    )
}

/// Source of the teacher for each deepening stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherChoice {
    /// The previous stage's cross-entropy model.
    Ce,
    /// The previous stage's model after sMBR fine-tuning on lattices built
    /// from its own posteriors.
    Smbr {
        alternatives: usize,
        #[serde(default = "tenth")]
        lr_scale: f64,
        #[serde(default)]
        epochs: Option<usize>,
        #[serde(default)]
        smbr: SmbrConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerwiseConfig {
    /// Stage 1 uses the input, first hidden width, and classes of
    /// `train.layout`; each further stage appends a layer of that width.
    pub train: TrainConfig,
    pub max_layers: usize,
    /// Criterion of stages after the first.
    #[serde(default)]
    pub stage_loss: LossConfig,
    #[serde(default = "ce_teacher")]
    pub teacher: TeacherChoice,
    /// Fraction of the training set used by every stage but the last.
    #[serde(default = "one")]
    pub subset_fraction: f64,
}

fn ce_teacher() -> TeacherChoice {
    TeacherChoice::Ce
}

impl LayerwiseConfig {
    pub fn new(train: TrainConfig, max_layers: usize) -> Self {
        LayerwiseConfig {
            train,
            max_layers,
            stage_loss: LossConfig::default(),
            teacher: TeacherChoice::Ce,
            subset_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.max_layers == 0 {
            return Err(Error::config("max_layers", "must be at least 1"));
        }
        self.stage_loss.validate()?;
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::config("subset_fraction", "must lie in (0, 1]"));
        }
        if let TeacherChoice::Smbr {
            alternatives,
            lr_scale,
            epochs,
            smbr,
        } = &self.teacher
        {
            if *alternatives == 0 || *alternatives > self.train.layout.num_classes() {
                return Err(Error::config("teacher.alternatives", "must lie in [1, num_classes]"));
            }
            if !(*lr_scale > 0.0) {
                return Err(Error::config("teacher.lr_scale", "must be positive"));
            }
            if *epochs == Some(0) {
                return Err(Error::config("teacher.epochs", "must be at least 1"));
            }
            smbr.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StageRecord {
    pub layers: usize,
    /// Model the stage started from.
    pub init: ModelParams,
    pub w_hard: f64,
    pub w_soft: f64,
    /// The teacher that supplied soft targets, absent for stage 1.
    pub teacher: Option<ModelParams>,
    pub train_utterances: usize,
    pub output: TrainOutput,
}

#[derive(Debug, Clone)]
pub struct LayerwiseOutput {
    pub stages: Vec<StageRecord>,
    /// All stages' metrics, periods renumbered to run consecutively.
    pub metrics: Metrics,
}

impl LayerwiseOutput {
    pub fn final_model(&self) -> &ModelParams {
        &self.stages.last().expect("at least one stage").output.model
    }
}

/// Grows a model one LSTM layer at a time. Stage 1 trains a one-layer
/// model with cross entropy; stage `k + 1` deepens the stage-`k` teacher
/// and trains on `stage_loss` against the hard labels and the teacher's
/// posteriors.
pub fn layerwise_train<S, V>(cfg: &LayerwiseConfig, train: &S, valid: &V) -> Result<LayerwiseOutput>
where
    S: UtteranceSource + ?Sized,
    V: UtteranceSource + ?Sized,
{
    cfg.validate()?;
    let base = &cfg.train.layout;
    let first = ModelLayout::new(base.input_dim(), vec![base.lstm_layers()[0]], base.num_classes())?;

    let mut stages: Vec<StageRecord> = Vec::with_capacity(cfg.max_layers);
    let mut metrics = Metrics::default();
    let mut teacher: Option<ModelParams> = None;
    for layers in 1..=cfg.max_layers {
        let seed = cfg.train.seed.wrapping_add(layers as u64 - 1);
        let idx = if layers < cfg.max_layers && cfg.subset_fraction < 1.0 {
            subset_indices(train.len(), cfg.subset_fraction, cfg.train.workers, seed)?
        } else {
            (0..train.len()).collect()
        };
        let view = SubsetView::new(train, idx)?;
        let mut run = cfg.train.clone();
        run.seed = seed;

        let (init, loss) = match &teacher {
            None => (xavier_init(&first, seed), LossConfig::HARD_ONLY),
            Some(t) => (deepen(t, seed), cfg.stage_loss),
        };
        run.layout = init.layout().clone();
        run.loss = loss;
        info!(
            "stage {layers}: {} layers, w_hard {} w_soft {}",
            layers, loss.w_hard, loss.w_soft
        );
        let soft = match &teacher {
            Some(t) if loss.w_soft > 0.0 => Some(teacher_posteriors(t, &view, &run.clip)?),
            _ => None,
        };
        let output = train_from(
            &run,
            init.clone(),
            &view,
            Objective::Frame {
                soft: soft.as_deref(),
            },
            valid,
            false,
        )?;
        metrics.extend_after(output.metrics.clone());

        let next_teacher = match &cfg.teacher {
            TeacherChoice::Ce => output.model.clone(),
            TeacherChoice::Smbr {
                alternatives,
                lr_scale,
                epochs,
                smbr,
            } if layers < cfg.max_layers => {
                let lattices = make_lattices(
                    &view,
                    output.model.layout().num_classes(),
                    Some((&output.model, &run.clip)),
                    *alternatives,
                    seed,
                )?;
                let mut tune = TransferConfig::new(run.clone());
                tune.lr_scale = *lr_scale;
                tune.smbr = *smbr;
                if let Some(e) = epochs {
                    tune.train.epochs = *e;
                }
                let tuned = transfer_smbr(&output.model, &view, &lattices, valid, &tune)?;
                metrics.extend_after(tuned.metrics);
                tuned.model
            }
            TeacherChoice::Smbr { .. } => output.model.clone(),
        };
        stages.push(StageRecord {
            layers,
            init,
            w_hard: loss.w_hard,
            w_soft: loss.w_soft,
            teacher: teacher.take(),
            train_utterances: view.len(),
            output,
        });
        teacher = Some(next_teacher);
    }
    Ok(LayerwiseOutput { stages, metrics })
}
