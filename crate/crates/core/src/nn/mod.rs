//! Numeric substrate: tape autograd, transformer layers, optimizer, checkpoints.

pub mod checkpoint;
pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use kernels::Segment;
pub use layers::LayerConfig;
pub use optim::{AdamW, AdamWConfig, CosineWarmup};
pub use params::{ParamId, ParamStore};
