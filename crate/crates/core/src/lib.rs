//! Two-phase contrastive training of a small dual encoder for long-tailed
//! classification.
//!
//! Phase A fine-tunes both encoder branches with an image-to-text contrastive
//! loss on the (imbalanced) training split. Phase B freezes that backbone and
//! trains a residual linear adapter on class-balanced batches. Accuracy is
//! reported over many/medium/few-shot class splits.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`graph::Graph`]);
//! every random choice comes from a seeded ChaCha8 stream, so a
//! `(config, seed)` pair determines every parameter and logged number.

// `!(x > 0.0)` is how validation rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
mod bytes;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod dataset_file;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;

pub use adapter::{AdapterParams, Placement};
pub use checkpoint::Checkpoint;
pub use config::{DatasetSource, Mode, RunConfig};
pub use data::{LongTailedDataset, SamplerStrategy, Shot, SynthSpec};
pub use encoder::{ModelDims, ModelParams, PromptSpec};
pub use error::{Error, Result};
pub use eval::Metrics;
pub use graph::{Graph, NodeId};
pub use params::ParamStore;
pub use tensor::Tensor;
