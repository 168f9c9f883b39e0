//! Named parameter storage, gradient buffers and the Adam optimizer.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat registry of trainable matrices, addressed by [`ParamId`] or by name.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Mat>>,
    #[serde(skip)]
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    /// Register a matrix drawn from N(0, std²).
    pub fn register_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.register(name, Mat::from_vec(rows, cols, data))
    }

    pub fn register_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.register(name, Mat::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Mat> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.get(id).shape(), value.shape(), "set {}: shape", self.names[id.0]);
        self.values[id.0] = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), ParamId(i)))
            .collect();
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// Squared L2 norm over the selected parameters.
    pub fn norm_sq(&self, ids: &[ParamId]) -> f64 {
        ids.iter().map(|&id| self.get(id).norm_sq()).sum()
    }

    /// Order-sensitive hash of every value's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            name.hash(&mut h);
            for v in value.as_slice() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Per-parameter gradient buffers, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Mat) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn merge(&mut self, other: ParamGrads) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), &g);
            }
        }
    }

    /// Add the gradient of `weight·Σθ²` for the selected parameters.
    pub fn add_l2(&mut self, store: &ParamStore, ids: &[ParamId], weight: f64) {
        if weight == 0.0 {
            return;
        }
        for &id in ids {
            let value = store.get(id);
            let mut g = Mat::zeros(value.rows(), value.cols());
            g.add_scaled(value, 2.0 * weight);
            self.accumulate(id, &g);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Mat::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Mat>>,
    second: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of the parameters in `trainable` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, trainable: &[ParamId]) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for &id in trainable {
            let Some(grad) = grads.get(id) else { continue };
            let m = self.first[id.0].get_or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
            let v = self.second[id.0].get_or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
            let value = store.get_mut(id);
            for (((p, g), m), v) in value
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::row_vector(vec![0.25, -1.5, 3.0]));
        let before = store.checksum();
        let mut grads = ParamGrads::new(store.len());
        grads.accumulate(id, &Mat::row_vector(vec![1.0, 2.0, -3.0]));
        let mut adam = Adam::new(0.0);
        adam.step(&mut store, &grads, &[id]);
        assert_eq!(store.checksum(), before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::row_vector(vec![1.0, 1.0]));
        let mut grads = ParamGrads::new(1);
        grads.accumulate(id, &Mat::row_vector(vec![4.0, -0.5]));
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads, &[id]);
        let w = store.get(id).as_slice();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.register("a", Mat::scalar(1.0));
        let b = store.register("b", Mat::scalar(1.0));
        let mut grads = ParamGrads::new(2);
        grads.accumulate(a, &Mat::scalar(1.0));
        grads.accumulate(b, &Mat::scalar(1.0));
        Adam::new(0.1).step(&mut store, &grads, &[a]);
        assert!(store.get(a).item() < 1.0);
        assert_eq!(store.get(b).item(), 1.0);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::scalar(1.0));
        let before = store.checksum();
        store.get_mut(id).as_mut_slice()[0] = 1.0 + f64::EPSILON;
        assert_ne!(store.checksum(), before);
    }
}
