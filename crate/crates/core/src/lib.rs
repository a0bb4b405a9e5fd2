//! Deep LSTM acoustic-model training at desk scale: BPTT with clipping and
//! saturation skipping, frame and sMBR criteria, layer-wise deepening,
//! distillation, and synchronous data-parallel training with BMUF and EMA
//! over a mesh allreduce.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allreduce;
pub mod data;
pub mod error;
pub mod jsonl;
pub mod losses;
pub mod matrix;
pub mod model;
mod rng;
pub mod smbr;
pub mod sync;
pub mod train;

pub use data::{Dataset, HmmGenConfig, SyntheticTask, Utterance, UtteranceSource};
pub use error::{Error, Result};
pub use losses::LossConfig;
pub use matrix::Matrix;
pub use model::{ClipConfig, Gradients, ModelLayout, ModelParams};
pub use rng::stream_rng;
pub use smbr::{Lattice, LatticeArc, SmbrConfig};
pub use sync::SyncStrategy;
pub use train::{EvalReport, Metrics, TrainConfig, TrainOutput};
