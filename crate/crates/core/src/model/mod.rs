//! The four-component question generation network and its checkpoints.

pub mod checkpoint;
pub mod config;
pub mod decoding;
pub mod network;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use decoding::DecodingParams;
pub use network::{parameter_shapes, Component, FeatureSequence, FeatureSource, Generation, Model};
