//! Utterance datasets: synthetic Gaussian-HMM generation, JSON-lines IO,
//! and synthetic lattice construction.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::matrix::Matrix;
use crate::model::{posteriors, stack_frames, stack_labels, ClipConfig, ModelParams};
use crate::rng::{stream_rng, streams};
use crate::smbr::{Lattice, LatticeArc};

/// One sequence of feature frames with per-frame state labels and, when a
/// teacher has been run over it, per-frame soft targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawUtterance", into = "RawUtterance")]
pub struct Utterance {
    id: String,
    frames: Matrix,
    labels: Vec<usize>,
    soft: Option<Matrix>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtterance {
    id: String,
    frames: Vec<Vec<f64>>,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    soft: Option<Vec<Vec<f64>>>,
}

impl TryFrom<RawUtterance> for Utterance {
    type Error = Error;

    fn try_from(raw: RawUtterance) -> Result<Self> {
        let width = raw.frames.first().map_or(0, Vec::len);
        let frames = Matrix::from_rows(&raw.frames, width)?;
        let soft = raw
            .soft
            .map(|rows| {
                let c = rows.first().map_or(0, Vec::len);
                Matrix::from_rows(&rows, c)
            })
            .transpose()?;
        Utterance::new(raw.id, frames, raw.labels, soft)
    }
}

impl From<Utterance> for RawUtterance {
    fn from(u: Utterance) -> Self {
        RawUtterance {
            id: u.id,
            frames: u.frames.to_rows(),
            labels: u.labels,
            soft: u.soft.map(|m| m.to_rows()),
        }
    }
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        frames: Matrix,
        labels: Vec<usize>,
        soft: Option<Matrix>,
    ) -> Result<Self> {
        let id = id.into();
        if labels.len() != frames.rows() {
            return Err(Error::contract(format!(
                "utterance {id}: {} labels for {} frames",
                labels.len(),
                frames.rows()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Input(format!("utterance {id} has non-finite frames")));
        }
        if let Some(s) = &soft {
            if s.rows() != frames.rows() {
                return Err(Error::contract(format!(
                    "utterance {id}: soft targets cover {} of {} frames",
                    s.rows(),
                    frames.rows()
                )));
            }
        }
        Ok(Utterance {
            id,
            frames,
            labels,
            soft,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn soft(&self) -> Option<&Matrix> {
        self.soft.as_ref()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn with_soft(mut self, soft: Option<Matrix>) -> Result<Self> {
        if let Some(s) = &soft {
            if s.rows() != self.frames.rows() {
                return Err(Error::contract("soft target length mismatch"));
            }
        }
        self.soft = soft;
        Ok(self)
    }

    /// Stacks `k` frames into super frames; each super frame takes the label
    /// of its middle frame. Soft targets are dropped.
    pub fn stacked(&self, k: usize) -> Utterance {
        Utterance {
            id: self.id.clone(),
            frames: stack_frames(&self.frames, k),
            labels: stack_labels(&self.labels, k),
            soft: None,
        }
    }
}

/// Read access to a sequence corpus. Training procedures consume data
/// through this trait so callers can observe which parts are read.
pub trait UtteranceSource: Sync {
    fn len(&self) -> usize;
    fn id(&self, i: usize) -> &str;
    fn features(&self, i: usize) -> &Matrix;
    fn labels(&self, i: usize) -> &[usize];

    /// Per-frame soft targets attached to utterance `i`, if any.
    fn soft(&self, _i: usize) -> Option<&Matrix> {
        None
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn total_frames(&self) -> usize {
        (0..self.len()).map(|i| self.features(i).rows()).sum()
    }
}

/// The utterances of `inner` at `indices`, renumbered from zero.
#[derive(Debug, Clone)]
pub struct SubsetView<'a, S: ?Sized> {
    inner: &'a S,
    indices: Vec<usize>,
}

impl<'a, S: UtteranceSource + ?Sized> SubsetView<'a, S> {
    pub fn new(inner: &'a S, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= inner.len()) {
            return Err(Error::contract(format!(
                "subset index {bad} outside a corpus of {}",
                inner.len()
            )));
        }
        Ok(SubsetView { inner, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl<S: UtteranceSource + ?Sized> UtteranceSource for SubsetView<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn id(&self, i: usize) -> &str {
        self.inner.id(self.indices[i])
    }

    fn features(&self, i: usize) -> &Matrix {
        self.inner.features(self.indices[i])
    }

    fn labels(&self, i: usize) -> &[usize] {
        self.inner.labels(self.indices[i])
    }

    fn soft(&self, i: usize) -> Option<&Matrix> {
        self.inner.soft(self.indices[i])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Dataset { utterances }
    }

    pub fn stacked(&self, k: usize) -> Dataset {
        Dataset::new(self.utterances.iter().map(|u| u.stacked(k)).collect())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.frames.cols())
    }

    /// The utterances at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.utterances[i].clone()).collect())
    }
}

impl UtteranceSource for Dataset {
    fn len(&self) -> usize {
        self.utterances.len()
    }

    fn id(&self, i: usize) -> &str {
        &self.utterances[i].id
    }

    fn features(&self, i: usize) -> &Matrix {
        &self.utterances[i].frames
    }

    fn labels(&self, i: usize) -> &[usize] {
        &self.utterances[i].labels
    }

    fn soft(&self, i: usize) -> Option<&Matrix> {
        self.utterances[i].soft.as_ref()
    }
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    jsonl::write_jsonl_file(path, &data.utterances)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    jsonl::read_jsonl_file(path).map(Dataset::new)
}

/// Gaussian hidden Markov model used to synthesize labelled sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmmGenConfig {
    pub num_states: usize,
    pub feature_dim: usize,
    /// Row-stochastic `S x S` transition matrix.
    pub transition: Vec<Vec<f64>>,
    /// Initial state distribution; uniform when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Per-state emission means, `S x d`.
    pub means: Vec<Vec<f64>>,
    /// Per-state diagonal emission variances, `S x d`.
    pub variances: Vec<Vec<f64>>,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub seed: u64,
}

fn check_stochastic(row: &[f64], field: &str) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::config(field, "probabilities must be non-negative"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::config(field, format!("row sums to {total}, not 1")));
    }
    Ok(())
}

impl HmmGenConfig {
    pub fn validate(&self) -> Result<()> {
        let (s, d) = (self.num_states, self.feature_dim);
        if s == 0 || d == 0 {
            return Err(Error::config("hmm", "num_states and feature_dim must be positive"));
        }
        if self.transition.len() != s || self.transition.iter().any(|r| r.len() != s) {
            return Err(Error::config("hmm.transition", format!("must be {s}x{s}")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check_stochastic(row, &format!("hmm.transition[{i}]"))?;
        }
        if let Some(init) = &self.initial {
            if init.len() != s {
                return Err(Error::config("hmm.initial", format!("must have {s} entries")));
            }
            check_stochastic(init, "hmm.initial")?;
        }
        for (name, m) in [("hmm.means", &self.means), ("hmm.variances", &self.variances)] {
            if m.len() != s || m.iter().any(|r| r.len() != d) {
                return Err(Error::config(name, format!("must be {s}x{d}")));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::config(name, "entries must be finite"));
            }
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::config("hmm.variances", "variances must be positive"));
        }
        if self.min_len > self.max_len {
            return Err(Error::config("hmm.min_len", "exceeds max_len"));
        }
        Ok(())
    }
}

/// Samples `cfg.count` utterances: a Markov state chain per utterance with
/// Gaussian features per frame; labels are the true states.
pub fn generate_hmm_dataset(cfg: &HmmGenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, streams::HMM);
    let rows: Vec<WeightedIndex<f64>> = cfg
        .transition
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::config("hmm.transition", e.to_string())))
        .collect::<Result<_>>()?;
    let initial = match &cfg.initial {
        Some(p) => WeightedIndex::new(p).map_err(|e| Error::config("hmm.initial", e.to_string()))?,
        None => WeightedIndex::new(vec![1.0; cfg.num_states]).expect("uniform weights"),
    };
    let stds: Vec<Vec<f64>> = cfg
        .variances
        .iter()
        .map(|r| r.iter().map(|v| v.sqrt()).collect())
        .collect();
    let length = Uniform::new_inclusive(cfg.min_len, cfg.max_len)
        .map_err(|e| Error::config("hmm.min_len", e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut utterances = Vec::with_capacity(cfg.count);
    for n in 0..cfg.count {
        let t_len = length.sample(&mut rng);
        let mut labels = Vec::with_capacity(t_len);
        let mut frames = Matrix::zeros(t_len, cfg.feature_dim);
        let mut state = initial.sample(&mut rng);
        for t in 0..t_len {
            if t > 0 {
                state = rows[state].sample(&mut rng);
            }
            labels.push(state);
            for (k, x) in frames.row_mut(t).iter_mut().enumerate() {
                *x = cfg.means[state][k] + stds[state][k] * unit.sample(&mut rng);
            }
        }
        utterances.push(Utterance::new(format!("utt{n:05}"), frames, labels, None)?);
    }
    Ok(Dataset::new(utterances))
}

/// Builds one lattice per utterance. Each frame offers the reference state
/// plus `alternatives - 1` distinct competitors drawn without replacement
/// from the model's posterior at that frame (uniformly without a model).
/// Arcs are ordered by state id and carry zero LM score.
pub fn make_lattices<S: UtteranceSource + ?Sized>(
    data: &S,
    num_classes: usize,
    model: Option<(&ModelParams, &ClipConfig)>,
    alternatives: usize,
    seed: u64,
) -> Result<Vec<Lattice>> {
    if alternatives == 0 {
        return Err(Error::contract("lattices need at least one arc per frame"));
    }
    if alternatives > num_classes {
        return Err(Error::contract(format!(
            "{alternatives} arcs per frame exceeds {num_classes} classes"
        )));
    }
    if let Some((m, _)) = model {
        if m.layout().num_classes() != num_classes {
            return Err(Error::contract("model class count does not match"));
        }
    }
    let mut rng = stream_rng(seed, streams::LATTICE);
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let reference = data.labels(i).to_vec();
        if reference.iter().any(|&s| s >= num_classes) {
            return Err(Error::contract(format!("utterance {} label out of range", data.id(i))));
        }
        let post = match model {
            Some((m, clip)) => Some(posteriors(m, data.features(i), clip)?),
            None => None,
        };
        let mut frames = Vec::with_capacity(reference.len());
        for (t, &r) in reference.iter().enumerate() {
            let mut states = vec![r];
            let mut weights: Vec<f64> = match &post {
                Some(p) => p.row(t).to_vec(),
                None => vec![1.0; num_classes],
            };
            weights[r] = 0.0;
            for _ in 1..alternatives {
                let pick = if weights.iter().sum::<f64>() > 0.0 {
                    WeightedIndex::new(&weights).expect("positive mass").sample(&mut rng)
                } else {
                    // posterior mass exhausted: fall back to uniform over unused states
                    let free: Vec<usize> = (0..num_classes).filter(|s| !states.contains(s)).collect();
                    free[sample(&mut rng, free.len(), 1).index(0)]
                };
                states.push(pick);
                weights[pick] = 0.0;
            }
            states.sort_unstable();
            frames.push(
                states
                    .into_iter()
                    .map(|state| LatticeArc {
                        state,
                        lm_score: 0.0,
                    })
                    .collect(),
            );
        }
        out.push(Lattice::new(frames, reference)?);
    }
    Ok(out)
}

/// Compact description of a synthetic speech-like task: a sticky,
/// sparsely connected Gaussian HMM with a train and a validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub num_states: usize,
    pub feature_dim: usize,
    /// Standard deviation of the random state means.
    pub mean_spread: f64,
    /// Emission standard deviation, shared by every state and dimension.
    pub noise_std: f64,
    pub self_loop: f64,
    /// Number of distinct successor states each state can move to.
    pub successors: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_count: usize,
    pub valid_count: usize,
    /// Seed of the HMM itself (means and transitions).
    pub task_seed: u64,
    /// Seed of the sampled utterances.
    pub data_seed: u64,
    /// Magnitude of a per-state mean perturbation that moves the task into
    /// a related domain; zero for the base domain.
    pub domain_shift: f64,
    pub shift_seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            num_states: 24,
            feature_dim: 8,
            mean_spread: 1.0,
            noise_std: 1.0,
            self_loop: 0.6,
            successors: 2,
            min_len: 20,
            max_len: 60,
            train_count: 2000,
            valid_count: 200,
            task_seed: 1,
            data_seed: 2,
            domain_shift: 0.0,
            shift_seed: 3,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.num_states < 2 || self.feature_dim == 0 {
            return Err(Error::config("task.num_states", "need at least 2 states and 1 dimension"));
        }
        if !(0.0..1.0).contains(&self.self_loop) {
            return Err(Error::config("task.self_loop", "must lie in [0, 1)"));
        }
        if self.successors == 0 || self.successors >= self.num_states {
            return Err(Error::config("task.successors", "must be in [1, num_states)"));
        }
        if !(self.noise_std > 0.0) || !(self.mean_spread >= 0.0) || !(self.domain_shift >= 0.0) {
            return Err(Error::config("task.noise_std", "spreads must be non-negative, noise positive"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("task.min_len", "need 1 <= min_len <= max_len"));
        }
        Ok(())
    }

    /// The HMM for one split; the two splits share parameters and differ
    /// only in sampling seed and count.
    pub fn hmm(&self, split: Split) -> Result<HmmGenConfig> {
        self.validate()?;
        let (s, d) = (self.num_states, self.feature_dim);
        let mut rng = stream_rng(self.task_seed, streams::TASK);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut means: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..d).map(|_| self.mean_spread * normal.sample(&mut rng)).collect())
            .collect();
        let mut transition = vec![vec![0.0; s]; s];
        for (i, row) in transition.iter_mut().enumerate() {
            let others: Vec<usize> = (0..s).filter(|&j| j != i).collect();
            let picks = sample(&mut rng, others.len(), self.successors);
            let raw: Vec<f64> = (0..self.successors).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = raw.iter().sum();
            for (p, w) in picks.iter().zip(&raw) {
                row[others[p]] = (1.0 - self.self_loop) * w / total;
            }
            row[i] = self.self_loop;
            // exact row sums for the stochastic-matrix check
            let sum: f64 = row.iter().sum();
            row[i] += 1.0 - sum;
        }
        if self.domain_shift > 0.0 {
            let mut shift_rng = stream_rng(self.shift_seed, streams::TASK);
            for m in means.iter_mut().flatten() {
                *m += self.domain_shift * normal.sample(&mut shift_rng);
            }
        }
        let (count, seed) = match split {
            Split::Train => (self.train_count, self.data_seed),
            Split::Valid => (self.valid_count, self.data_seed.wrapping_add(0x5eed)),
        };
        Ok(HmmGenConfig {
            num_states: s,
            feature_dim: d,
            transition,
            initial: None,
            means,
            variances: vec![vec![self.noise_std * self.noise_std; d]; s],
            min_len: self.min_len,
            max_len: self.max_len,
            count,
            seed,
        })
    }

    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            generate_hmm_dataset(&self.hmm(Split::Train)?)?,
            generate_hmm_dataset(&self.hmm(Split::Valid)?)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}
