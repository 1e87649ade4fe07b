//! Transformer layers on top of the tape: attention, feed-forward and the
//! residual add + layer norm used after every sublayer.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::params::ParamStore;

/// Added to forbidden attention logits before the softmax. After the max
/// shift `exp` underflows to exactly zero, so masked keys contribute nothing
/// to the weighted sum.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionMask {
    pub causal: bool,
    /// `true` marks a key position that must not be attended.
    pub key_padding: Option<Vec<bool>>,
}

impl AttentionMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self {
            causal: true,
            key_padding: None,
        }
    }

    pub fn with_key_padding(mut self, padding: Vec<bool>) -> Self {
        self.key_padding = Some(padding);
        self
    }

    pub fn is_masked(&self, query: usize, key: usize) -> bool {
        (self.causal && key > query)
            || self
                .key_padding
                .as_ref()
                .is_some_and(|p| p.get(key).copied().unwrap_or(false))
    }

    /// Additive logit mask, or `None` when nothing is masked.
    pub fn additive(&self, queries: usize, keys: usize) -> Result<Option<Array2<f64>>> {
        if let Some(p) = &self.key_padding {
            if p.len() != keys {
                return Err(Error::Shape(format!(
                    "key padding of length {} for {keys} keys",
                    p.len()
                )));
            }
        }
        let mut any = false;
        let mut m = Array2::zeros((queries, keys));
        for q in 0..queries {
            let mut open = 0;
            for k in 0..keys {
                if self.is_masked(q, k) {
                    m[[q, k]] = MASK_VALUE;
                    any = true;
                } else {
                    open += 1;
                }
            }
            if open == 0 {
                return Err(Error::FullyMaskedRow { row: q });
            }
        }
        Ok(any.then_some(m))
    }
}

pub struct Attended {
    pub output: NodeId,
    /// One `queries × keys` row-stochastic block per head.
    pub weights: Vec<NodeId>,
}

/// Multi-head scaled dot-product attention over already projected inputs.
pub fn scaled_dot_attention(
    g: &mut Graph,
    query: NodeId,
    key: NodeId,
    value: NodeId,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Attended> {
    let (q_rows, width) = g.value(query).dim();
    let (k_rows, k_width) = g.value(key).dim();
    let (v_rows, v_width) = g.value(value).dim();
    if width != k_width {
        return Err(Error::Shape(format!(
            "query width {width} != key width {k_width}"
        )));
    }
    if k_rows != v_rows {
        return Err(Error::Shape(format!("{k_rows} keys but {v_rows} values")));
    }
    if heads == 0 || width % heads != 0 || v_width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} not divisible by {heads} heads"
        )));
    }
    let additive = mask.additive(q_rows, k_rows)?;
    let head_width = width / heads;
    let value_width = v_width / heads;
    let scale = 1.0 / (head_width as f64).sqrt();

    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(query, h * head_width, head_width)?;
        let kh = g.slice_cols(key, h * head_width, head_width)?;
        let vh = g.slice_cols(value, h * value_width, value_width)?;
        let raw = g.matmul_t(qh, kh)?;
        let mut logits = g.scale(raw, scale);
        if let Some(m) = &additive {
            logits = g.add_const(logits, m)?;
        }
        let w = g.softmax(logits);
        outputs.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let output = if heads == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    Ok(Attended { output, weights })
}

/// `x · W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Projected multi-head attention. Queries come from `x`, keys and values
/// from `memory` (`memory == x` for self-attention).
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    memory: NodeId,
    mask: &AttentionMask,
    heads: usize,
) -> Result<NodeId> {
    let q = linear(g, store, &format!("{prefix}.query"), x)?;
    let k = linear(g, store, &format!("{prefix}.key"), memory)?;
    let v = linear(g, store, &format!("{prefix}.value"), memory)?;
    let attended = scaled_dot_attention(g, q, k, v, mask, heads)?;
    linear(g, store, &format!("{prefix}.output"), attended.output)
}

/// `fc2(gelu(fc1(x)))`
pub fn feed_forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

/// Post-norm residual: `LayerNorm(x + sublayer_out)`.
pub fn add_norm(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    sublayer_out: NodeId,
) -> Result<NodeId> {
    let sum = g.add(x, sublayer_out)?;
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(sum, gamma, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::truncated_normal;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let mut g = Graph::new();
        let q = g.input(array![[0.3, -1.0], [2.0, 0.5]]);
        let k = g.input(array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let v = g.input(array![[1.0, 0.0], [2.0, 3.0], [6.0, -3.0]]);
        let out = scaled_dot_attention(&mut g, q, k, v, &AttentionMask::none(), 1).unwrap();
        for row in g.value(out.output).rows() {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!(row[1].abs() < 1e-12);
        }
    }

    #[test]
    fn causal_first_row_sees_only_first_value() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = truncated_normal(&mut r, 4, 6, 1.0);
        let v_val = truncated_normal(&mut r, 4, 6, 1.0);
        let q = g.input(x.clone());
        let k = g.input(x);
        let v = g.input(v_val.clone());
        let out = scaled_dot_attention(&mut g, q, k, v, &AttentionMask::causal(), 2).unwrap();
        assert_eq!(g.value(out.output).row(0), v_val.row(0));
        for w in &out.weights {
            let wv = g.value(*w);
            for qi in 0..4 {
                for ki in qi + 1..4 {
                    assert_eq!(wv[[qi, ki]], 0.0);
                }
            }
        }
    }

    #[test]
    fn two_by_two_weights_match_direct_softmax() {
        let qv = array![[0.5, -0.2], [1.1, 0.7]];
        let kv = array![[0.3, 0.9], [-0.4, 0.2]];
        let mut g = Graph::new();
        let q = g.input(qv.clone());
        let k = g.input(kv.clone());
        let v = g.input(Array2::eye(2));
        let out = scaled_dot_attention(&mut g, q, k, v, &AttentionMask::none(), 1).unwrap();
        let w = g.value(out.weights[0]);
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (qv[[i, 0]] * kv[[j, 0]] + qv[[i, 1]] * kv[[j, 1]]) / 2f64.sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            for j in 0..2 {
                assert!((w[[i, j]] - s[j].exp() / z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic_with_padding() {
        let mut r = rng();
        let mut g = Graph::new();
        let q = g.input(truncated_normal(&mut r, 3, 8, 1.0));
        let k = g.input(truncated_normal(&mut r, 5, 8, 1.0));
        let v = g.input(truncated_normal(&mut r, 5, 8, 1.0));
        let mask = AttentionMask::none().with_key_padding(vec![false, true, false, false, true]);
        let out = scaled_dot_attention(&mut g, q, k, v, &mask, 4).unwrap();
        assert_eq!(g.value(out.output).dim(), (3, 8));
        for w in &out.weights {
            for row in g.value(*w).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert_eq!(row[1], 0.0);
                assert_eq!(row[4], 0.0);
            }
        }
    }

    #[test]
    fn attention_errors() {
        let mut g = Graph::new();
        let q = g.input(Array2::zeros((2, 6)));
        let k = g.input(Array2::zeros((3, 6)));
        let v = g.input(Array2::zeros((3, 6)));
        assert!(matches!(
            scaled_dot_attention(&mut g, q, k, v, &AttentionMask::none(), 4),
            Err(Error::Config(_))
        ));
        let mask = AttentionMask::none().with_key_padding(vec![true; 3]);
        assert!(matches!(
            scaled_dot_attention(&mut g, q, k, v, &mask, 2),
            Err(Error::FullyMaskedRow { row: 0 })
        ));
    }

    fn ffn_store(w1: Array2<f64>, b1: Array2<f64>, w2: Array2<f64>, b2: Array2<f64>) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("ffn.fc1.weight", w1);
        s.insert("ffn.fc1.bias", b1);
        s.insert("ffn.fc2.weight", w2);
        s.insert("ffn.fc2.bias", b2);
        s
    }

    #[test]
    fn feed_forward_zero_and_bias_cases() {
        let store = ffn_store(
            Array2::zeros((4, 8)),
            Array2::zeros((1, 8)),
            Array2::zeros((8, 4)),
            Array2::zeros((1, 4)),
        );
        let mut g = Graph::new();
        let x = g.input(Array2::zeros((3, 4)));
        let y = feed_forward(&mut g, &store, "ffn", x).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        let b2 = array![[0.5, -1.0, 2.0, 0.25]];
        let store = ffn_store(Array2::eye(4), Array2::zeros((1, 4)), Array2::zeros((4, 4)), b2.clone());
        let mut g = Graph::new();
        let x = g.input(array![[1.0, -2.0, 3.0, 0.0], [0.1, 0.2, 0.3, 0.4]]);
        let y = feed_forward(&mut g, &store, "ffn", x).unwrap();
        for row in g.value(y).rows() {
            assert_eq!(row, b2.row(0));
        }
    }

    #[test]
    fn feed_forward_matches_loop_oracle() {
        let mut r = rng();
        let x = truncated_normal(&mut r, 3, 4, 1.0);
        let w1 = truncated_normal(&mut r, 4, 6, 0.5);
        let b1 = truncated_normal(&mut r, 1, 6, 0.5);
        let w2 = truncated_normal(&mut r, 6, 4, 0.5);
        let b2 = truncated_normal(&mut r, 1, 4, 0.5);
        let store = ffn_store(w1.clone(), b1.clone(), w2.clone(), b2.clone());
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = feed_forward(&mut g, &store, "ffn", xi).unwrap();

        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        for i in 0..3 {
            let mut h = [0.0; 6];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut acc = b1[[0, j]];
                for k in 0..4 {
                    acc += x[[i, k]] * w1[[k, j]];
                }
                *hj = gelu(acc);
            }
            for j in 0..4 {
                let mut acc = b2[[0, j]];
                for (k, hk) in h.iter().enumerate() {
                    acc += hk * w2[[k, j]];
                }
                assert!((g.value(y)[[i, j]] - acc).abs() < 1e-12);
            }
        }
    }

    fn ln_store(gamma: Array2<f64>, beta: Array2<f64>) -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("ln.gamma", gamma);
        s.insert("ln.beta", beta);
        s
    }

    #[test]
    fn add_norm_cases() {
        let shift = array![[0.3, -0.7]];
        let store = ln_store(array![[2.0, 5.0]], shift.clone());
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 4.0], [-2.0, 0.5]]);
        let neg = g.scale(x, -1.0);
        let y = add_norm(&mut g, &store, "ln", x, neg).unwrap();
        for row in g.value(y).rows() {
            assert_eq!(row, shift.row(0));
        }

        let store = ln_store(array![[1.0, 1.0]], array![[0.0, 0.0]]);
        let mut g = Graph::new();
        let x = g.input(array![[1.0, 3.0]]);
        let z = g.input(Array2::zeros((1, 2)));
        let y = add_norm(&mut g, &store, "ln", x, z).unwrap();
        // mean 2, std 1 → [-1, 1] up to the epsilon inside the root
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((g.value(y)[[0, 0]] + expect).abs() < 1e-12);
        assert!((g.value(y)[[0, 1]] - expect).abs() < 1e-12);
    }

    #[test]
    fn add_norm_rows_have_zero_mean() {
        let mut r = rng();
        let store = ln_store(Array2::ones((1, 16)), Array2::zeros((1, 16)));
        let mut g = Graph::new();
        let a = g.input(truncated_normal(&mut r, 5, 16, 3.0));
        let b = g.input(truncated_normal(&mut r, 5, 16, 3.0));
        let y = add_norm(&mut g, &store, "ln", a, b).unwrap();
        for row in g.value(y).rows() {
            assert!(row.mean().unwrap().abs() < 1e-6);
        }
    }
}
