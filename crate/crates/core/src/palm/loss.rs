//! Uncertainty and adaptation objectives.

use crate::error::Result;
use crate::tape::{softmax, Tape, Var};
use crate::tensor::Tensor;

/// Uniform-target cross-entropy of temperature-scaled logits, plus the
/// divergence of the scaled softmax from uniform as a diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyLoss {
    /// Scalar to backpropagate: `-(1/(B C)) sum_b sum_j log softmax(z_b / T)_j`,
    /// the class-average of the per-class cross-entropies.
    pub loss: Var,
    /// Batch mean of `KL(softmax(z / T) || u)`.
    pub kl: f64,
}

pub fn uncertainty_loss(tape: &mut Tape, logits: Var, temperature: f64) -> Result<UncertaintyLoss> {
    let scaled = tape.scale(logits, 1.0 / temperature)?;
    let logp = tape.log_softmax(scaled)?;
    let mean = tape.mean(logp)?;
    let loss = tape.scale(mean, -1.0)?;
    let value = tape.value(scaled);
    let (_, classes) = value.dims2().expect("logits are 2-D");
    let probs = softmax(value.values(), classes);
    Ok(UncertaintyLoss {
        loss,
        kl: kl_to_uniform(&probs, classes),
    })
}

/// Batch mean of `sum_c p_c ln(p_c C)` with `0 ln 0 := 0`.
pub fn kl_to_uniform(probs: &[f64], classes: usize) -> f64 {
    let rows = probs.len() / classes;
    let c = classes as f64;
    let total: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * c).ln())
        .sum();
    total / rows as f64
}

/// Shannon entropy of one probability vector, `0 ln 0 := 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Entropy gate `factor * ln C`.
pub fn entropy_threshold(classes: usize, factor: f64) -> f64 {
    factor * (classes as f64).ln()
}

/// Per-sample entropies as a `(B, 1)` node.
pub fn sample_entropies(tape: &mut Tape, logits: Var) -> Result<Var> {
    let p = tape.softmax(logits)?;
    let logp = tape.log_softmax(logits)?;
    let plogp = tape.mul(p, logp)?;
    let rows = tape.sum_rows(plogp)?;
    tape.scale(rows, -1.0)
}

/// Per-sample `-sum_c p_c log q_c` with `p = softmax(target)`, `q = softmax(pred)`.
pub fn sample_cross_entropies(tape: &mut Tape, target_logits: Var, pred_logits: Var) -> Result<Var> {
    let p = tape.softmax(target_logits)?;
    let logq = tape.log_softmax(pred_logits)?;
    let prod = tape.mul(p, logq)?;
    let rows = tape.sum_rows(prod)?;
    tape.scale(rows, -1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptationLoss {
    pub total: Var,
    /// Mean gated entropy.
    pub entropy: f64,
    /// Mean consistency cross-entropy (before weighting by lambda).
    pub consistency: f64,
    /// Samples whose entropy passed the gate.
    pub admitted: usize,
}

/// `mean_b 1[H_b <= h0] H_b + lambda * mean_b CE(p_b, p_aug_b)`.
///
/// The gate is evaluated on values and enters as a constant mask, so gated
/// samples contribute exactly zero entropy gradient.
pub fn adaptation_loss(tape: &mut Tape, logits: Var, aug_logits: Var, lambda: f64, h0: f64) -> Result<AdaptationLoss> {
    let h = sample_entropies(tape, logits)?;
    let mask: Vec<f64> = tape
        .value(h)
        .values()
        .iter()
        .map(|&v| if v <= h0 { 1.0 } else { 0.0 })
        .collect();
    let admitted = mask.iter().filter(|&&m| m > 0.0).count();
    let rows = mask.len();
    let mask = tape.input(Tensor::matrix(rows, 1, mask)?);
    let gated = tape.mul(h, mask)?;
    let entropy = tape.mean(gated)?;

    let ce = sample_cross_entropies(tape, logits, aug_logits)?;
    let consistency = tape.mean(ce)?;
    let weighted = tape.scale(consistency, lambda)?;
    let total = tape.add(entropy, weighted)?;
    Ok(AdaptationLoss {
        total,
        entropy: tape.value(entropy).values()[0],
        consistency: tape.value(consistency).values()[0],
        admitted,
    })
}

/// Ungated mean entropy.
pub fn mean_entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let h = sample_entropies(tape, logits)?;
    tape.mean(h)
}
