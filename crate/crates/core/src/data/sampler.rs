use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Position of one training instance: task index and row within that task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BatchItem {
    pub task: usize,
    pub index: usize,
}

/// Task probabilities `(ln|D_m| + γ) / Σ_m̃ (ln|D_m̃| + γ)`.
pub fn stratified_probabilities(sizes: &[usize], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("smoothing factor must be positive, got {gamma}")));
    }
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("no datasets to sample from".into()));
    }
    if let Some(m) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyDataset(format!("#{m}")));
    }
    let logs: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
    Ok(probabilities_from_logs(&logs, gamma))
}

fn probabilities_from_logs(log_sizes: &[f64], gamma: f64) -> Vec<f64> {
    let weights: Vec<f64> = log_sizes.iter().map(|l| l + gamma).collect();
    // Equal weights give exactly 1/M, which the division below may miss by
    // an ulp.
    if weights.iter().all(|&w| w == weights[0]) {
        return vec![1.0 / weights.len() as f64; weights.len()];
    }
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Endless stream of batches; each element picks its task from the
/// stratified distribution, then a row uniformly within that task.
pub struct StratifiedSampler {
    sizes: Vec<usize>,
    probabilities: Vec<f64>,
    dist: WeightedIndex<f64>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl StratifiedSampler {
    pub fn new(sizes: &[usize], gamma: f64, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        let probabilities = stratified_probabilities(sizes, gamma)?;
        let dist = WeightedIndex::new(&probabilities)
            .map_err(|e| Error::InvalidConfig(format!("sampling weights: {e}")))?;
        Ok(Self {
            sizes: sizes.to_vec(),
            probabilities,
            dist,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn draw(&mut self) -> BatchItem {
        let task = self.dist.sample(&mut self.rng);
        let index = self.rng.gen_range(0..self.sizes[task]);
        BatchItem { task, index }
    }
}

impl Iterator for StratifiedSampler {
    type Item = Vec<BatchItem>;

    fn next(&mut self) -> Option<Self::Item> {
        Some((0..self.batch_size).map(|_| self.draw()).collect())
    }
}

/// One pass over the union of all datasets in seeded shuffled order.
pub struct UniformSampler {
    order: Vec<BatchItem>,
    batch_size: usize,
    cursor: usize,
}

impl UniformSampler {
    pub fn epoch(sizes: &[usize], batch_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        let mut order: Vec<BatchItem> = sizes
            .iter()
            .enumerate()
            .flat_map(|(task, &n)| (0..n).map(move |index| BatchItem { task, index }))
            .collect();
        order.shuffle(rng);
        Ok(Self {
            order,
            batch_size,
            cursor: 0,
        })
    }
}

impl Iterator for UniformSampler {
    type Item = Vec<BatchItem>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(batch)
    }
}
