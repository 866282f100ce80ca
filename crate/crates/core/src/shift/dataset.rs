use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_CLASSES: usize = 5;
pub const DEFAULT_DIM: usize = 8;
pub const DEFAULT_SAMPLES: usize = 5000;
pub const TEST_FRACTION: f64 = 0.2;

const MEAN_RADIUS: f64 = 3.5;
const MIN_SEPARATION: f64 = 4.0;
const STD_RANGE: (f64, f64) = (0.6, 1.1);

/// Gaussian clusters, one per class, with diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanDataset {
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    /// Generation-order ids of the test rows.
    pub test_ids: Vec<usize>,
}

impl CleanDataset {
    pub fn n_test(&self) -> usize {
        self.test_y.len()
    }

    /// Per-feature standard deviation of the training split.
    pub fn train_feature_std(&self) -> Vec<f64> {
        let x = &self.train_x;
        let (n, d) = x.dims2().unwrap();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }
}

fn sample_means<R: Rng>(classes: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let draw = |rng: &mut R| -> Vec<Vec<f64>> {
        (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * MEAN_RADIUS / norm).collect()
            })
            .collect()
    };
    let min_gap = |means: &[Vec<f64>]| -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d2: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d2.sqrt());
            }
        }
        best
    };
    // Rejection sampling; fall back to the best-separated draw.
    let mut best = draw(rng);
    let mut best_gap = min_gap(&best);
    for _ in 0..500 {
        if best_gap >= MIN_SEPARATION {
            break;
        }
        let cand = draw(rng);
        let gap = min_gap(&cand);
        if gap > best_gap {
            best = cand;
            best_gap = gap;
        }
    }
    best
}

/// Generates `n` labeled samples (class `i % classes` for sample `i`) and a
/// seeded disjoint train/test split.
pub fn make_clean(classes: usize, dim: usize, n: usize, seed: u64) -> Result<CleanDataset> {
    if classes < 2 || dim == 0 {
        return Err(Error::InvalidConfig("dataset needs >= 2 classes and >= 1 dimension".into()));
    }
    let n_test = ((n as f64) * TEST_FRACTION).round() as usize;
    if n_test < 2 || n - n_test < 2 {
        return Err(Error::InvalidConfig(format!("{n} samples is too few to split")));
    }
    let mut rng = seed::rng(seed::derive(seed, &[0x6461_7461]));
    let means = sample_means(classes, dim, &mut rng);
    let stds: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(STD_RANGE.0..STD_RANGE.1)).collect())
        .collect();

    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut features = Vec::with_capacity(n * dim);
    for &y in &labels {
        for k in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            features.push(means[y][k] + stds[y][k] * z);
        }
    }
    let all = Tensor::matrix(n, dim, features)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (test_ids, train_ids) = order.split_at(n_test);
    let mut test_ids = test_ids.to_vec();
    let mut train_ids = train_ids.to_vec();
    test_ids.sort_unstable();
    train_ids.sort_unstable();

    Ok(CleanDataset {
        classes,
        dim,
        seed,
        means,
        stds,
        train_x: super::gather_rows(&all, &train_ids),
        train_y: train_ids.iter().map(|&i| labels[i]).collect(),
        test_x: super::gather_rows(&all, &test_ids),
        test_y: test_ids.iter().map(|&i| labels[i]).collect(),
        test_ids,
    })
}
