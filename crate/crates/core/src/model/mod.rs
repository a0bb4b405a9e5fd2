//! Stacked unidirectional LSTM acoustic model.

mod format;
mod layout;
mod lstm;
mod params;
mod stack;

pub use format::{deserialize, serialize, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub(crate) use format::{read_model, Reader};
pub use layout::{HeadBlock, LayerBlock, ModelLayout};
pub use lstm::{
    backward, forward, posteriors, ClipConfig, ForwardCache, Gradients, Interval, LayerCache,
};
pub use params::{deepen, xavier_bound, xavier_init, ModelParams};
pub use stack::{stack_frames, stack_labels};
