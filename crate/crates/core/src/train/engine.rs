//! Synchronous data-parallel trainer: one thread per worker, an
//! orchestrator on the calling thread, model averaging over the mesh
//! allreduce.

use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::metrics::{MetricRow, Metrics, ModelKind};
use super::{evaluate, partition_indices, sgd_momentum_step, VelocityState};
use crate::allreduce::{memory_mesh, mesh_allreduce, partition, MemoryTransport, MeshEndpoint, Partition};
use crate::data::UtteranceSource;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, TargetFrame};
use crate::matrix::Matrix;
use crate::model::{backward, forward, xavier_init, Gradients, ModelParams};
use crate::rng::{stream_rng, streams};
use crate::smbr::{smbr_loss_and_grad, Lattice, SmbrConfig};
use crate::sync::{bmuf_step, ema_update, ma_update, BmufState, EmaState, MaState, SyncStrategy};

/// What a worker minimizes on each utterance.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// `combined_loss` with the run's `LossConfig`. Soft targets come from
    /// `soft` when given, otherwise from the data source. Hard labels are
    /// read only when `w_hard > 0`.
    Frame { soft: Option<&'a [Matrix]> },
    /// Minimizes `(T - F) / T` where `F` is the sMBR expected state accuracy
    /// on the utterance's lattice.
    Smbr {
        lattices: &'a [Lattice],
        config: SmbrConfig,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelParams,
    pub ema: Option<ModelParams>,
    /// Arithmetic mean of every synchronized global model.
    pub ma: Option<ModelParams>,
    pub metrics: Metrics,
    pub bmuf: Option<BmufState>,
    pub ema_state: Option<EmaState>,
    pub ma_state: MaState,
    /// Every global model produced at a synchronization, when requested.
    pub global_history: Vec<Vec<f64>>,
}

/// Trains `cfg.layout` from Xavier initialization with the frame objective.
pub fn train_parallel<S, V>(cfg: &TrainConfig, train: &S, valid: &V) -> Result<TrainOutput>
where
    S: UtteranceSource + ?Sized,
    V: UtteranceSource + ?Sized,
{
    cfg.validate()?;
    let init = xavier_init(&cfg.layout, cfg.seed);
    train_from(cfg, init, train, Objective::Frame { soft: None }, valid, false)
}

enum Report {
    Sync {
        index: usize,
        loss_sum: f64,
        utterances: usize,
        epoch_end: bool,
        theta_g: Option<Vec<f64>>,
    },
    Failed {
        worker: usize,
        error: String,
    },
}

struct Command {
    lr: f64,
}

/// Sends a failure report if the worker exits without finishing, including
/// by panic.
struct ExitGuard {
    worker: usize,
    reports: Sender<Report>,
    finished: bool,
}

impl Drop for ExitGuard {
    fn drop(&mut self) {
        if !self.finished {
            let _ = self.reports.send(Report::Failed {
                worker: self.worker,
                error: "worker stopped unexpectedly".into(),
            });
        }
    }
}

struct Worker<'a, S: ?Sized> {
    me: usize,
    cfg: &'a TrainConfig,
    data: &'a S,
    objective: Objective<'a>,
    split: Vec<usize>,
    steps_per_epoch: usize,
    part: &'a Partition,
}

fn shuffle_seed(seed: u64, worker: usize, epoch: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | worker as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl<S: UtteranceSource + ?Sized> Worker<'_, S> {
    fn run(
        &self,
        mut model: ModelParams,
        mut endpoint: MeshEndpoint<MemoryTransport>,
        reports: &Sender<Report>,
        commands: &Receiver<Command>,
    ) -> Result<Option<BmufState>> {
        let cfg = self.cfg;
        let mut velocity = VelocityState::zeros(model.values().len());
        let mut bmuf = match cfg.sync {
            SyncStrategy::Bmuf { eta, zeta } => {
                Some(BmufState::new(model.values().to_vec(), eta, zeta)?)
            }
            SyncStrategy::ModelAverage => None,
        };
        let mut lr = cfg.learning_rate;
        let mut sync_index = 0;
        for epoch in 0..cfg.epochs {
            let mut order = self.split.clone();
            order.shuffle(&mut stream_rng(shuffle_seed(cfg.seed, self.me, epoch), streams::SHUFFLE));
            let mut batches: Vec<Vec<usize>> =
                order.chunks(cfg.mini_batch).map(<[usize]>::to_vec).collect();
            batches.iter_mut().for_each(|b| b.sort_unstable());

            let (mut loss_sum, mut utterances) = (0.0, 0);
            for step in 0..self.steps_per_epoch {
                if let Some(batch) = batches.get(step) {
                    let (grads, l, n) = batch_gradient(&model, batch, self.data, &self.objective, cfg)?;
                    loss_sum += l;
                    utterances += n;
                    (model, velocity) = sgd_momentum_step(model, &grads, velocity, lr, cfg.momentum)?;
                }
                let epoch_end = step + 1 == self.steps_per_epoch;
                if (step + 1) % cfg.sync_period != 0 && !epoch_end {
                    continue;
                }
                let theta_bar = mesh_allreduce(model.values(), self.me, self.part, &mut endpoint)?;
                let theta_g = match bmuf.take() {
                    Some(state) => {
                        let next = bmuf_step(state, &theta_bar)?;
                        let g = next.theta_g.clone();
                        bmuf = Some(next);
                        g
                    }
                    None => theta_bar,
                };
                model = model
                    .with_values(theta_g)
                    .map_err(|e| Error::Input(format!("global model diverged: {e}")))?;
                sync_index += 1;
                let _ = reports.send(Report::Sync {
                    index: sync_index,
                    loss_sum,
                    utterances,
                    epoch_end,
                    theta_g: (self.me == 0).then(|| model.values().to_vec()),
                });
                (loss_sum, utterances) = (0.0, 0);
                if epoch_end && epoch + 1 < cfg.epochs {
                    lr = commands
                        .recv()
                        .map_err(|_| Error::Aggregation("orchestrator stopped the run".into()))?
                        .lr;
                }
            }
        }
        Ok(bmuf)
    }
}

/// Mean gradient over the utterances of a batch whose back propagation was
/// not skipped, plus the summed per-utterance loss and the number of
/// utterances evaluated.
fn batch_gradient<S: UtteranceSource + ?Sized>(
    model: &ModelParams,
    batch: &[usize],
    data: &S,
    objective: &Objective<'_>,
    cfg: &TrainConfig,
) -> Result<(Gradients, f64, usize)> {
    let layout = model.layout();
    let mut sum = vec![0.0; model.values().len()];
    let (mut kept, mut loss_sum, mut seen) = (0usize, 0.0, 0usize);
    for &i in batch {
        let x = data.features(i);
        if x.rows() == 0 {
            continue;
        }
        let cache = forward(model, x, &cfg.clip)?;
        let (loss, d_logits) = utterance_loss(cache.posteriors(), i, data, objective, cfg)?;
        loss_sum += loss;
        seen += 1;
        let g = backward(model, &cache, &d_logits, &cfg.clip)?;
        if g.is_skipped() {
            debug!("back propagation skipped for utterance {}", data.id(i));
            continue;
        }
        sum.iter_mut().zip(g.values()).for_each(|(s, v)| *s += v);
        kept += 1;
    }
    if kept == 0 {
        return Ok((Gradients::skipped(layout), loss_sum, seen));
    }
    let inv = 1.0 / kept as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    Ok((Gradients::from_values(layout, sum)?, loss_sum, seen))
}

fn utterance_loss<S: UtteranceSource + ?Sized>(
    post: &Matrix,
    i: usize,
    data: &S,
    objective: &Objective<'_>,
    cfg: &TrainConfig,
) -> Result<(f64, Matrix)> {
    match objective {
        Objective::Frame { soft } => {
            let labels = (cfg.loss.w_hard > 0.0).then(|| data.labels(i));
            let soft_m = if cfg.loss.w_soft > 0.0 {
                let m = match soft {
                    Some(all) => all.get(i),
                    None => data.soft(i),
                };
                Some(m.ok_or_else(|| {
                    Error::contract(format!("utterance {} has no soft targets", data.id(i)))
                })?)
            } else {
                None
            };
            let targets: Vec<TargetFrame<'_>> = (0..post.rows())
                .map(|t| TargetFrame {
                    hard: labels.and_then(|l| l.get(t).copied()),
                    soft: soft_m.map(|m| m.row(t)),
                })
                .collect();
            combined_loss(post, &targets, &cfg.loss)
        }
        Objective::Smbr { lattices, config } => {
            let lat = lattices.get(i).ok_or_else(|| {
                Error::contract(format!("no lattice for utterance {}", data.id(i)))
            })?;
            let mut logp = post.clone();
            logp.as_mut_slice()
                .iter_mut()
                .for_each(|p| *p = p.max(f64::MIN_POSITIVE).ln());
            let out = smbr_loss_and_grad(lat, &logp, config)?;
            let t_len = post.rows() as f64;
            // dF/dz_c = g_c - p_c * sum_k g_k through the softmax; the loss is -F/T + 1
            let mut d = Matrix::zeros(post.rows(), post.cols());
            for t in 0..post.rows() {
                let g = out.grad.row(t);
                let total: f64 = g.iter().sum();
                for (c, v) in d.row_mut(t).iter_mut().enumerate() {
                    *v = -(g[c] - post.get(t, c) * total) / t_len;
                }
            }
            Ok(((t_len - out.expected_accuracy) / t_len, d))
        }
    }
}

struct PendingSync {
    reports: usize,
    loss_sum: f64,
    utterances: usize,
    epoch_end: bool,
    theta_g: Option<Vec<f64>>,
}

struct Orchestrator<'a, V: ?Sized> {
    cfg: &'a TrainConfig,
    template: &'a ModelParams,
    valid: &'a V,
    start: Instant,
    metrics: Metrics,
    ma: MaState,
    ema: Option<EmaState>,
    history: Option<Vec<Vec<f64>>>,
    theta_g: Vec<f64>,
    period_loss: f64,
    period_utts: usize,
}

impl<V: UtteranceSource + ?Sized> Orchestrator<'_, V> {
    fn eval_row(&self, model: &ModelParams, period: usize, kind: ModelKind, train_loss: Option<f64>) -> Result<MetricRow> {
        let report = evaluate(model, self.valid, &self.cfg.clip)?;
        Ok(MetricRow {
            period,
            model: kind,
            train_loss,
            val_loss: report.ce_loss,
            val_fer: report.fer,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Applies the post-sync bookkeeping and returns the global model's
    /// validation loss when a metric row was recorded.
    fn complete(&mut self, index: usize, sync: PendingSync) -> Result<Option<f64>> {
        let theta_g = sync
            .theta_g
            .ok_or_else(|| Error::Aggregation("missing global model report".into()))?;
        self.ma = ma_update(std::mem::take(&mut self.ma), &theta_g)?;
        if let Some(alpha) = self.cfg.ema_alpha {
            self.ema = Some(match self.ema.take() {
                None => EmaState::new(theta_g.clone(), alpha)?,
                Some(state) => ema_update(state, &theta_g)?,
            });
        }
        if let Some(h) = &mut self.history {
            h.push(theta_g.clone());
        }
        self.theta_g = theta_g;
        self.period_loss += sync.loss_sum;
        self.period_utts += sync.utterances;

        let due = sync.epoch_end
            || (self.cfg.eval_interval > 0 && index.is_multiple_of(self.cfg.eval_interval));
        if !due {
            return Ok(None);
        }
        let train_loss = (self.period_utts > 0).then(|| self.period_loss / self.period_utts as f64);
        (self.period_loss, self.period_utts) = (0.0, 0);
        let global = self.template.with_values(self.theta_g.clone())?;
        let row = self.eval_row(&global, index, ModelKind::Global, train_loss)?;
        let val = row.val_loss;
        info!(
            "sync {index}: train {:.4} val {:.4} fer {:.4}",
            train_loss.unwrap_or(f64::NAN),
            row.val_loss,
            row.val_fer
        );
        self.metrics.push(row);
        if let Some(ema) = &self.ema {
            let m = self.template.with_values(ema.export())?;
            let row = self.eval_row(&m, index, ModelKind::Ema, train_loss)?;
            self.metrics.push(row);
        }
        Ok(Some(val))
    }
}

/// Runs synchronous data-parallel training from `init`. With
/// `record_history`, every synchronized global model is kept in the output.
pub fn train_from<S, V>(
    cfg: &TrainConfig,
    init: ModelParams,
    train: &S,
    objective: Objective<'_>,
    valid: &V,
    record_history: bool,
) -> Result<TrainOutput>
where
    S: UtteranceSource + ?Sized,
    V: UtteranceSource + ?Sized,
{
    cfg.validate()?;
    if let Objective::Smbr { lattices, config } = objective {
        config.validate()?;
        if lattices.len() != train.len() {
            return Err(Error::contract(format!(
                "{} lattices for {} utterances",
                lattices.len(),
                train.len()
            )));
        }
    }
    let n = cfg.workers;
    let splits = partition_indices(train.len(), n, cfg.seed)?;
    let max_split = splits.iter().map(Vec::len).max().unwrap_or(0);
    let steps_per_epoch = max_split.div_ceil(cfg.mini_batch);
    let part = partition(init.values().len(), n)?;
    let timeout = Duration::from_millis(cfg.timeout_ms);
    info!(
        "training {} parameters on {} utterances: {n} workers, {steps_per_epoch} steps per epoch",
        init.values().len(),
        train.len()
    );

    let mut orch = Orchestrator {
        cfg,
        template: &init,
        valid,
        start: Instant::now(),
        metrics: Metrics::default(),
        ma: MaState::default(),
        ema: None,
        history: record_history.then(Vec::new),
        theta_g: init.values().to_vec(),
        period_loss: 0.0,
        period_utts: 0,
    };
    let initial_row = orch.eval_row(&init, 0, ModelKind::Global, None)?;
    orch.metrics.push(initial_row);

    let (report_tx, report_rx) = channel::<Report>();
    let endpoints = memory_mesh(n, timeout);

    thread::scope(|scope| {
        let mut command_txs = Vec::with_capacity(n);
        let mut handles = Vec::with_capacity(n);
        for ((me, split), transport) in splits.into_iter().enumerate().zip(endpoints) {
            let (cmd_tx, cmd_rx) = channel::<Command>();
            command_txs.push(cmd_tx);
            let reports = report_tx.clone();
            let model = init.clone();
            let part = &part;
            handles.push(scope.spawn(move || {
                let worker = Worker {
                    me,
                    cfg,
                    data: train,
                    objective,
                    split,
                    steps_per_epoch,
                    part,
                };
                let mut guard = ExitGuard {
                    worker: me,
                    reports: reports.clone(),
                    finished: false,
                };
                let result = worker.run(model, MeshEndpoint::new(transport), &reports, &cmd_rx);
                if let Err(e) = &result {
                    let _ = reports.send(Report::Failed {
                        worker: me,
                        error: e.to_string(),
                    });
                }
                guard.finished = true;
                result
            }));
        }
        drop(report_tx);

        let outcome = orchestrate(&mut orch, &report_rx, command_txs, n);
        let mut bmuf = None;
        for (me, h) in handles.into_iter().enumerate() {
            match h.join() {
                Ok(Ok(state)) if me == 0 => bmuf = state,
                Ok(_) => {}
                Err(_) => warn!("worker {me} panicked"),
            }
        }
        match outcome {
            Ok(()) => Ok(bmuf),
            Err(reason) => Err(reason),
        }
    })
    .map_err(|reason: String| Error::Aborted {
        reason,
        partial: Box::new(orch.metrics.clone()),
    })
    .and_then(|bmuf| {
        let model = init.with_values(orch.theta_g.clone())?;
        let ema = orch
            .ema
            .as_ref()
            .map(|e| init.with_values(e.export()))
            .transpose()?;
        let ma = (orch.ma.count > 0)
            .then(|| init.with_values(orch.ma.mean.clone()))
            .transpose()?;
        Ok(TrainOutput {
            model,
            ema,
            ma,
            metrics: orch.metrics,
            bmuf,
            ema_state: orch.ema,
            ma_state: orch.ma,
            global_history: orch.history.unwrap_or_default(),
        })
    })
}

/// Receives worker reports until every epoch has ended. Returns the abort
/// reason on failure; dropping the command senders releases any worker
/// waiting for the next epoch.
fn orchestrate<V: UtteranceSource + ?Sized>(
    orch: &mut Orchestrator<'_, V>,
    reports: &Receiver<Report>,
    commands: Vec<Sender<Command>>,
    n: usize,
) -> std::result::Result<(), String> {
    let cfg = orch.cfg;
    let mut pending: BTreeMap<usize, PendingSync> = BTreeMap::new();
    let mut next_index = 1;
    let mut epochs_done = 0;
    let mut lr = cfg.learning_rate;
    let mut best = f64::INFINITY;
    while epochs_done < cfg.epochs {
        let report = reports
            .recv()
            .map_err(|_| "all workers stopped before training finished".to_string())?;
        match report {
            Report::Failed { worker, error } => {
                return Err(format!("worker {worker} failed: {error}"));
            }
            Report::Sync {
                index,
                loss_sum,
                utterances,
                epoch_end,
                theta_g,
            } => {
                let entry = pending.entry(index).or_insert(PendingSync {
                    reports: 0,
                    loss_sum: 0.0,
                    utterances: 0,
                    epoch_end,
                    theta_g: None,
                });
                entry.reports += 1;
                entry.loss_sum += loss_sum;
                entry.utterances += utterances;
                if theta_g.is_some() {
                    entry.theta_g = theta_g;
                }
            }
        }
        while pending.get(&next_index).is_some_and(|p| p.reports == n) {
            let sync = pending.remove(&next_index).expect("entry present");
            let epoch_end = sync.epoch_end;
            let val = orch.complete(next_index, sync).map_err(|e| e.to_string())?;
            next_index += 1;
            if !epoch_end {
                continue;
            }
            epochs_done += 1;
            let val = val.expect("epoch ends always record a row");
            if val < best {
                best = val;
            } else if cfg.lr_halving {
                lr *= 0.5;
                info!("validation loss did not improve, learning rate now {lr}");
            }
            if epochs_done < cfg.epochs {
                for tx in &commands {
                    tx.send(Command { lr })
                        .map_err(|_| "a worker exited early".to_string())?;
                }
            }
        }
    }
    Ok(())
}
