//! Probes for how rotary position embedding shapes the use of query/key
//! dimensions in attention heads.
//!
//! The crate trains a toy retrieval head with and without RoPE, measures
//! per-dimension magnitudes and ablation losses, fits sparse query masks
//! that score each dimension's utility, and scores recorded attention
//! heads by how much of their mass lands on long-range context.

pub mod attention;
pub mod autodiff;
pub mod dims;
pub mod error;
pub mod fig1;
pub mod gradcheck;
pub mod heads;
pub mod mask;
pub mod optim;
pub mod precise;
pub mod rope;
pub mod snapshot;
pub mod tensor;
pub mod toy;

pub use attention::{attend, attend_masked, attention_weights, AttentionInput, ScaleMode};
pub use autodiff::{Gradient, Graph, NodeId, ParamId};
pub use error::{Error, Result};
pub use optim::{OptimizerKind, OptimizerState};
pub use rope::{DimOrdering, Layout, RopeConfig};
pub use tensor::Tensor;
pub use toy::{EmbeddingStore, Episode, TaskConfig};
