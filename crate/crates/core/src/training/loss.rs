//! Token-level cross-entropy for caption and question generation.
//!
//! Both objectives are the negative log-likelihood of each target token
//! given its prefix, averaged over the non-PAD target positions.

use ndarray::Array2;

use crate::error::Result;
use crate::nn::{Graph, NodeId};
use crate::tokenizer::PAD;

/// Maps PAD to `None` so it drops out of both the sum and the count.
pub fn loss_targets(targets: &[u32]) -> Vec<Option<usize>> {
    targets
        .iter()
        .map(|&t| (t != PAD).then_some(t as usize))
        .collect()
}

/// Adds the sequence loss to a graph.
pub fn sequence_loss_node(g: &mut Graph, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
    g.cross_entropy(logits, &loss_targets(targets))
}

/// Mean negative log-probability of the non-PAD targets.
pub fn sequence_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let loss = sequence_loss_node(&mut g, l, targets)?;
    Ok(g.value(loss)[[0, 0]])
}

/// Caption generation loss.
pub fn caption_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<f64> {
    sequence_loss(logits, targets)
}

/// Question generation loss.
pub fn question_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<f64> {
    sequence_loss(logits, targets)
}
