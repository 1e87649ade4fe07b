//! Differentiable building blocks: the autodiff tape, named parameters and
//! transformer layers built from them.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{Graph, Gradients, NodeId};
pub use layers::{AttentionMask, MASK_VALUE};
pub use params::ParamStore;
