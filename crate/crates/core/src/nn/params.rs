use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;

/// Named parameter blocks. Names are dot-separated paths whose first
/// segment identifies the owning component.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

/// Biases and layer-norm scale/shift are exempt from weight decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// Normal(0, std) truncated at two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn init_linear<R: Rng + ?Sized>(&mut self, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{prefix}.weight"), truncated_normal(rng, fan_in, fan_out, INIT_STD));
        self.insert(format!("{prefix}.bias"), Array2::zeros((1, fan_out)));
    }

    pub fn init_layer_norm(&mut self, prefix: &str, width: usize) {
        self.insert(format!("{prefix}.gamma"), Array2::ones((1, width)));
        self.insert(format!("{prefix}.beta"), Array2::zeros((1, width)));
    }

    /// Query/key/value/output projections.
    pub fn init_attention<R: Rng + ?Sized>(&mut self, rng: &mut R, prefix: &str, width: usize) {
        for proj in ["query", "key", "value", "output"] {
            self.init_linear(rng, &format!("{prefix}.{proj}"), width, width);
        }
    }

    pub fn init_feed_forward<R: Rng + ?Sized>(&mut self, rng: &mut R, prefix: &str, width: usize, hidden: usize) {
        self.init_linear(rng, &format!("{prefix}.fc1"), width, hidden);
        self.init_linear(rng, &format!("{prefix}.fc2"), hidden, width);
    }
}
