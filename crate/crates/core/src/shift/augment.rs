use rand_distr::{Distribution, Normal};

use crate::seed;
use crate::tensor::Tensor;

use super::dataset::CleanDataset;
use super::FeatureBlock;

/// Jitter standard deviation relative to each feature's clean-train spread.
pub const AUGMENT_STD_FACTOR: f64 = 0.05;

/// Additive Gaussian jitter, deterministic per `(seed, batch index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmenter {
    sigma: Vec<f64>,
    seed: u64,
}

impl Augmenter {
    pub fn new(sigma: Vec<f64>, seed: u64) -> Self {
        Self { sigma, seed }
    }

    pub fn from_dataset(dataset: &CleanDataset, seed: u64) -> Self {
        let sigma = dataset
            .train_feature_std()
            .into_iter()
            .map(|s| s * AUGMENT_STD_FACTOR)
            .collect();
        Self::new(sigma, seed)
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.sigma.iter().map(|s| s * factor).collect(), self.seed)
    }

    pub fn augment(&self, batch: &FeatureBlock, batch_index: usize) -> FeatureBlock {
        let cols = batch.cols();
        assert_eq!(cols, self.sigma.len(), "augmenter width mismatch");
        let mut rng = seed::rng(seed::derive(self.seed, &[0x6175_6700, batch_index as u64]));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let values = batch
            .tensor()
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.sigma[i % cols] * normal.sample(&mut rng))
            .collect();
        FeatureBlock::new(Tensor::matrix(batch.rows(), cols, values).expect("finite jitter")).expect("2-D")
    }
}
