//! Knowledge-aware visual question generation for remote sensing imagery.
//!
//! The crate covers the whole pipeline: word-level tokenization, a small
//! reverse-mode autodiff kernel with transformer building blocks, the
//! four-component encoder/decoder model (image encoder, caption decoder,
//! knowledge text encoder, question decoder), the three-stage training
//! procedure, dataset construction from commonsense triplets, and the
//! BLEU/METEOR/ROUGE-L/CIDEr evaluation suite.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
