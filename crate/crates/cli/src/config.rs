//! Run configuration file and data loading shared by the subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dlstm_core::data::{load_dataset, Dataset, HmmGenConfig, SyntheticTask, UtteranceSource};
use dlstm_core::losses::LossConfig;
use dlstm_core::smbr::SmbrConfig;
use dlstm_core::train::{TeacherChoice, TrainConfig};
use dlstm_core::ModelLayout;
use serde::{Deserialize, Serialize};

/// Everything a run needs. Missing sections take defaults; unknown keys
/// are rejected. A run's `manifest.json` is itself a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic task used when no data files are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<SyntheticTask>,
    /// Explicit HMM for `gen-data`, instead of a synthetic task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmm: Option<HmmGenConfig>,
    /// Frames per super frame applied to loaded or generated data.
    #[serde(default = "default_stack")]
    pub stack: usize,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layerwise: Option<LayerwiseSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allreduce_bench: Option<BenchSection>,
    /// Written by the tool; ignored on input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestInfo>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: None,
            hmm: None,
            stack: default_stack(),
            data: DataPaths::default(),
            train: None,
            layerwise: None,
            distill: None,
            transfer: None,
            eval: None,
            allreduce_bench: None,
            manifest: None,
        }
    }
}

fn default_stack() -> usize {
    3
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerwiseSection {
    #[serde(default = "default_max_layers")]
    pub max_layers: usize,
    #[serde(default)]
    pub stage_loss: LossConfig,
    #[serde(default = "ce")]
    pub teacher: TeacherChoice,
    #[serde(default = "one")]
    pub subset_fraction: f64,
}

impl Default for LayerwiseSection {
    fn default() -> Self {
        LayerwiseSection {
            max_layers: default_max_layers(),
            stage_loss: LossConfig::default(),
            teacher: ce(),
            subset_fraction: 1.0,
        }
    }
}

fn default_max_layers() -> usize {
    3
}

fn ce() -> TeacherChoice {
    TeacherChoice::Ce
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    /// Student hidden sizes; two layers of the teacher's top width if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_layers: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    /// Lattice JSONL aligned with the training data; built from the base
    /// model's posteriors when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattices: Option<PathBuf>,
    #[serde(default = "default_alternatives")]
    pub alternatives: usize,
    #[serde(default = "one")]
    pub subset_fraction: f64,
    #[serde(default = "tenth")]
    pub lr_scale: f64,
    #[serde(default)]
    pub smbr: SmbrConfig,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            base: None,
            lattices: None,
            alternatives: default_alternatives(),
            subset_fraction: 1.0,
            lr_scale: 0.1,
            smbr: SmbrConfig::default(),
        }
    }
}

fn default_alternatives() -> usize {
    4
}

fn tenth() -> f64 {
    0.1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Memory,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_bench_workers")]
    pub workers: Vec<usize>,
    /// Values per vector.
    #[serde(default = "default_bench_len")]
    pub len: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "memory")]
    pub transport: TransportKind,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            workers: default_bench_workers(),
            len: default_bench_len(),
            rounds: default_rounds(),
            transport: TransportKind::Memory,
        }
    }
}

fn default_bench_workers() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

fn default_bench_len() -> usize {
    100_000
}

fn default_rounds() -> usize {
    10
}

fn memory() -> TransportKind {
    TransportKind::Memory
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInfo {
    pub command: String,
    pub version: String,
    pub seed: u64,
}

/// A failure caused by the configuration or command line rather than
/// by the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn task(&self) -> SyntheticTask {
        self.task.clone().unwrap_or_default()
    }

    /// Training and validation sets, stacked.
    pub fn datasets(&self) -> anyhow::Result<(Dataset, Dataset)> {
        if self.stack == 0 {
            bail!(usage("invalid config `stack`: must be at least 1"));
        }
        let (train, valid) = match (&self.data.train, &self.data.valid) {
            (Some(t), Some(v)) => (read(t)?, read(v)?),
            (None, None) => self.task().generate()?,
            _ => bail!(usage("data.train and data.valid must be given together")),
        };
        if train.utterances.is_empty() || valid.utterances.is_empty() {
            bail!("training and validation data must be non-empty");
        }
        Ok((train.stacked(self.stack), valid.stacked(self.stack)))
    }

    /// Number of output classes implied by the data source.
    pub fn num_classes(&self, train: &Dataset, valid: &Dataset) -> usize {
        if self.data.train.is_none() {
            return self.task().num_states;
        }
        [train, valid]
            .iter()
            .flat_map(|d| (0..d.len()).flat_map(move |i| d.labels(i).iter().copied()))
            .max()
            .map_or(1, |m| m + 1)
    }

    /// The training section, with a two-layer default layout fitted to the
    /// data when none is configured.
    pub fn train_config(&self, train: &Dataset, valid: &Dataset) -> anyhow::Result<TrainConfig> {
        match &self.train {
            Some(t) => Ok(t.clone()),
            None => {
                let input = train.feature_dim().unwrap_or(1);
                let layout = ModelLayout::new(input, vec![32, 32], self.num_classes(train, valid))?;
                Ok(TrainConfig::new(layout))
            }
        }
    }

    /// Replaces relative paths with absolute ones so the manifest can be
    /// reused from any directory.
    pub fn absolutize(&mut self) -> anyhow::Result<()> {
        let fix = |p: &mut Option<PathBuf>| -> anyhow::Result<()> {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = std::env::current_dir()?.join(&*path);
                }
            }
            Ok(())
        };
        fix(&mut self.data.train)?;
        fix(&mut self.data.valid)?;
        if let Some(d) = &mut self.distill {
            fix(&mut d.teacher)?;
        }
        if let Some(t) = &mut self.transfer {
            fix(&mut t.base)?;
            fix(&mut t.lattices)?;
        }
        if let Some(e) = &mut self.eval {
            fix(&mut e.model)?;
        }
        Ok(())
    }
}

fn read(path: &Path) -> anyhow::Result<Dataset> {
    load_dataset(path).with_context(|| format!("reading {}", path.display()))
}
