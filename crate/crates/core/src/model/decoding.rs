//! Autoregressive decoding: greedy and beam search over a next-token scorer.

use crate::error::{Error, Result};
use crate::tokenizer::{BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodingParams {
    /// 1 means greedy.
    pub beam_size: usize,
    /// Cap on the generated length including BOS/EOS; the component's
    /// maximum applies when unset.
    pub max_len: Option<usize>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            beam_size: 1,
            max_len: None,
        }
    }
}

impl DecodingParams {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn beam(beam_size: usize) -> Self {
        Self {
            beam_size,
            max_len: None,
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// PAD and BOS never appear inside generated text.
fn allowed(token: usize) -> bool {
    token != PAD as usize && token != BOS as usize
}

fn argmax(logits: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if allowed(i) && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Runs greedy or beam decoding from BOS. `next` maps a prefix to the
/// logits of the token following it.
pub fn decode<F>(params: &DecodingParams, max_len: usize, mut next: F) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    if params.beam_size == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    if max_len < 2 {
        return Err(Error::Config("decoding needs room for BOS and one token".into()));
    }
    if params.beam_size == 1 {
        greedy(max_len, next)
    } else {
        beam_search(params.beam_size, max_len, &mut next)
    }
}

fn greedy<F>(max_len: usize, mut next: F) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let mut seq = vec![BOS];
    while seq.len() < max_len {
        let logits = next(&seq)?;
        let tok = argmax(&logits).ok_or_else(|| Error::Shape("empty vocabulary".into()))? as u32;
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(seq)
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<u32>,
    score: f64,
}

impl Hypothesis {
    /// Length-normalized log-probability over generated tokens.
    fn normalized(&self) -> f64 {
        self.score / (self.ids.len() - 1).max(1) as f64
    }
}

fn beam_search<F>(beam: usize, max_len: usize, next: &mut F) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Vec<f64>>,
{
    let mut live = vec![Hypothesis {
        ids: vec![BOS],
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() && finished.len() < beam {
        if live[0].ids.len() >= max_len {
            finished.append(&mut live);
            break;
        }
        let mut candidates = Vec::new();
        for hyp in &live {
            let logp = log_softmax(&next(&hyp.ids)?);
            let mut order: Vec<usize> = (0..logp.len()).filter(|&t| allowed(t)).collect();
            // stable sort keeps lower ids first on ties
            order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]));
            for &tok in order.iter().take(beam) {
                let mut ids = hyp.ids.clone();
                ids.push(tok as u32);
                candidates.push(Hypothesis {
                    ids,
                    score: hyp.score + logp[tok],
                });
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
        live.clear();
        for cand in candidates {
            if live.len() == beam {
                break;
            }
            if cand.ids.last() == Some(&EOS) {
                finished.push(cand);
            } else {
                live.push(cand);
            }
        }
    }
    finished.extend(live);
    finished
        .into_iter()
        .reduce(|best, h| if h.normalized() > best.normalized() { h } else { best })
        .map(|h| h.ids)
        .ok_or_else(|| Error::Shape("beam search produced no hypothesis".into()))
}
