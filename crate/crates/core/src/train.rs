//! Supervised source training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{argmax_rows, BnMode, Network};
use crate::optim::{self, OptimizerKind};
use crate::seed;
use crate::shift::gather_rows;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 100,
            seed: 0,
        }
    }
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = tape.value(logits).dims2().expect("logits are 2-D");
    let mut onehot = vec![0.0; rows * cols];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * cols + y] = 1.0;
    }
    let target = tape.input(Tensor::matrix(rows, cols, onehot)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// Minibatch Adam on cross-entropy, batch-norm in training mode. Returns the
/// mean loss of the last epoch (`None` when `epochs == 0`).
pub fn train_source(net: &mut Network, features: &Tensor, labels: &[usize], opts: &TrainOptions) -> Result<Option<f64>> {
    let (n, _) = features
        .dims2()
        .ok_or_else(|| Error::InvalidConfig("features must be 2-D".into()))?;
    if n != labels.len() {
        return Err(Error::InvalidConfig(format!("{n} rows but {} labels", labels.len())));
    }
    if opts.batch_size < 2 {
        return Err(Error::InvalidConfig("training batch size must be >= 2".into()));
    }
    for slot in net.slots_mut() {
        slot.set_uniform_lr(opts.lr);
    }
    let mut rng = seed::rng(seed::derive(opts.seed, &[0x7261_696e]));
    let mut order: Vec<usize> = (0..n).collect();
    let mut last = None;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size).filter(|c| c.len() >= 2) {
            let x = gather_rows(features, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let step = (|| -> Result<f64> {
                let pass = net.forward(&mut tape, &x, BnMode::Train)?;
                let loss = cross_entropy(&mut tape, pass.logits, &y)?;
                net.zero_grad();
                net.backward(&tape, loss)?;
                optim::step(net, OptimizerKind::Adam)?;
                net.update_running_stats(&pass.batch_stats, chunk.len());
                Ok(tape.value(loss).values()[0])
            })();
            match step {
                Ok(v) => total += v,
                Err(Error::NonFinite { .. }) => return Err(Error::TrainingDiverged { epoch, lr: opts.lr }),
                Err(e) => return Err(e),
            }
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch, lr: opts.lr });
        }
        last = Some(mean);
    }
    net.zero_grad();
    net.reset_adaptation_state();
    Ok(last)
}

/// Fraction of misclassified rows.
pub fn error_rate(net: &Network, features: &Tensor, labels: &[usize], mode: BnMode) -> Result<f64> {
    let logits = net.logits(features, mode)?;
    let wrong = argmax_rows(&logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}
