//! Synthetic distribution-shift benchmark: a clean Gaussian-cluster dataset,
//! parametric corruption families with five severities, and the stream
//! protocols that replay them to an adaptation method.
//!
//! Adaptation code only ever sees [`FeatureBlock`]s. Labels travel alongside
//! in [`HiddenLabels`], which exposes nothing but an error count.

mod augment;
mod corruption;
mod dataset;
mod stream;

pub use augment::{Augmenter, AUGMENT_STD_FACTOR};
pub use corruption::{corrupt, Corruption, Family, MAX_SEVERITY};
pub use dataset::{make_clean, CleanDataset, DEFAULT_CLASSES, DEFAULT_DIM, DEFAULT_SAMPLES, TEST_FRACTION};
pub use stream::{
    build_clean, build_ctta, build_gtta, build_mdtta, BatchDescriptor, Protocol, StreamBatch, StreamScenario,
    GTTA_SCHEDULE,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unlabeled `batch x features` block; the only input an adaptation step accepts.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock(Tensor);

impl FeatureBlock {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.dims2().is_none() {
            return Err(Error::InvalidTensor(format!(
                "feature block must be 2-D, got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Ground truth for one batch. Deliberately opaque: it can score predictions
/// but never hands the labels out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of predictions that disagree with the hidden labels.
    pub fn mistakes(&self, predictions: &[usize]) -> usize {
        assert_eq!(predictions.len(), self.0.len(), "prediction count mismatch");
        self.0.iter().zip(predictions).filter(|(y, p)| y != p).count()
    }

    pub fn error_rate(&self, predictions: &[usize]) -> f64 {
        self.mistakes(predictions) as f64 / self.0.len() as f64
    }
}

/// Copies the listed rows of a 2-D tensor, in order.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let (_, cols) = x.dims2().expect("2-D");
    let values = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::matrix(idx.len(), cols, values).expect("gathered rows")
}
