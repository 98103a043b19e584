//! Two-level Transformer, segmentation classifier, coherence regressor and
//! their losses.

mod checkpoint;
mod config;
mod network;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{ModelConfig, Variant};
pub use network::{
    coherence_loss, segmentation_loss, Bound, Dropout, ForwardOutput, Gradients, Mode, Network, NLL_EPS,
};
pub use params::ModelParams;

pub use crate::data::SnippetBatch;
