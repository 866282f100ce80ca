//! Reference adaptation strategies run over the same streams as the main
//! method: no adaptation, batch-statistics replacement, continual entropy
//! minimization on normalization parameters, first-block fine-tuning, and a
//! Fisher-accumulation layer-rate scheme.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{argmax_rows, BnMode, Network};
use crate::optim::{self, OptimizerKind};
use crate::palm::{adaptation_loss, entropy_threshold, mean_entropy};
use crate::shift::FeatureBlock;
use crate::tape::Tape;
use crate::train::cross_entropy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Source,
    BnStats,
    TentContinual,
    Surgical,
    /// Labeled "LAW-style": only the Fisher accumulation is reproduced; the
    /// mapping to layer rates is our own normalization.
    Law,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Source,
        BaselineKind::BnStats,
        BaselineKind::TentContinual,
        BaselineKind::Surgical,
        BaselineKind::Law,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            BaselineKind::Source => "source",
            BaselineKind::BnStats => "bn-stats",
            BaselineKind::TentContinual => "tent-continual",
            BaselineKind::Surgical => "surgical",
            BaselineKind::Law => "law",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown baseline {s:?}")))
    }
}

/// What a baseline step reports back to the runner.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutput {
    pub predictions: Vec<usize>,
    /// Trainable layers that received a nonzero rate.
    pub n_updated: usize,
    pub loss_entropy: Option<f64>,
    pub loss_consist: Option<f64>,
}

impl BaselineOutput {
    fn inference(predictions: Vec<usize>) -> Self {
        Self {
            predictions,
            n_updated: 0,
            loss_entropy: None,
            loss_consist: None,
        }
    }
}

/// Shared knobs of the gradient-based baselines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineParams {
    pub lr: f64,
    pub lambda: f64,
    pub entropy_gate_factor: f64,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lambda: 0.01,
            entropy_gate_factor: 0.4,
            epsilon: 1e-8,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Plain inference with running statistics.
pub fn source_step(net: &Network, batch: &FeatureBlock) -> Result<BaselineOutput> {
    let logits = net.logits(batch.tensor(), BnMode::Running)?;
    Ok(BaselineOutput::inference(argmax_rows(&logits)))
}

/// Inference with the current batch's normalization statistics.
pub fn bn_stats_step(net: &Network, batch: &FeatureBlock) -> Result<BaselineOutput> {
    let logits = net.logits(batch.tensor(), BnMode::Batch)?;
    Ok(BaselineOutput::inference(argmax_rows(&logits)))
}

/// One step of ungated mean entropy on batch-norm scale/shift only.
pub fn tent_step(net: &mut Network, batch: &FeatureBlock, params: &BaselineParams) -> Result<BaselineOutput> {
    let bn_layers = net.batch_norm_layers();
    net.train_only(&bn_layers, params.lr);
    net.zero_grad();
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, batch.tensor(), BnMode::Batch)?;
    let loss = mean_entropy(&mut tape, pass.logits)?;
    net.backward(&tape, loss)?;
    optim::step(net, params.optimizer)?;
    Ok(BaselineOutput {
        predictions: argmax_rows(tape.value(pass.logits)),
        n_updated: if params.lr > 0.0 { bn_layers.len() } else { 0 },
        loss_entropy: Some(tape.value(loss).values()[0]),
        loss_consist: None,
    })
}

/// Gated entropy plus consistency, minimized with every layer at its own
/// uniform rate (frozen layers at zero). Returns predictions and losses.
fn adapt_with_rates(net: &mut Network, batch: &FeatureBlock, augmented: &FeatureBlock, params: &BaselineParams) -> Result<(Vec<usize>, f64, f64)> {
    net.zero_grad();
    let mut tape = Tape::new();
    let clean = net.forward(&mut tape, batch.tensor(), BnMode::Batch)?;
    let aug = net.forward(&mut tape, augmented.tensor(), BnMode::Batch)?;
    let h0 = entropy_threshold(net.classes(), params.entropy_gate_factor);
    let loss = adaptation_loss(&mut tape, clean.logits, aug.logits, params.lambda, h0)?;
    net.backward(&tape, loss.total)?;
    optim::step(net, params.optimizer)?;
    Ok((argmax_rows(tape.value(clean.logits)), loss.entropy, loss.consistency))
}

/// Layers adapted by first-block fine-tuning: the first affine and its
/// normalization (just the head for a logistic model).
pub fn surgical_layers(net: &Network) -> Vec<usize> {
    (0..net.trainable_layers().min(2)).collect()
}

/// Fixed-rate fine-tuning of the first block on the full adaptation objective.
pub fn surgical_step(net: &mut Network, batch: &FeatureBlock, augmented: &FeatureBlock, params: &BaselineParams) -> Result<BaselineOutput> {
    let layers = surgical_layers(net);
    net.train_only(&layers, params.lr);
    let (predictions, ent, cons) = adapt_with_rates(net, batch, augmented, params)?;
    Ok(BaselineOutput {
        predictions,
        n_updated: if params.lr > 0.0 { layers.len() } else { 0 },
        loss_entropy: Some(ent),
        loss_consist: Some(cons),
    })
}

/// Accumulated diagonal Fisher information per trainable layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LawState {
    /// Running sum of per-batch Fisher diagonals.
    pub accumulated: BTreeMap<usize, Vec<f64>>,
    /// Fisher diagonal of the most recent batch.
    pub current: BTreeMap<usize, Vec<f64>>,
    /// Layer rates used in the most recent step.
    pub layer_rates: BTreeMap<usize, f64>,
    pub steps: u64,
}

impl LawState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds this batch's diagonal to the running sum.
    pub fn accumulate(&mut self, fisher: BTreeMap<usize, Vec<f64>>) {
        for (layer, f) in &fisher {
            let acc = self
                .accumulated
                .entry(*layer)
                .or_insert_with(|| vec![0.0; f.len()]);
            acc.iter_mut().zip(f).for_each(|(a, v)| *a += v);
        }
        self.current = fisher;
        self.steps += 1;
    }

    /// `kappa * mean(F_n) / (max_m mean(F_m) + eps)`, clamped to `[0, kappa]`.
    pub fn layer_rates(&self, kappa: f64, eps: f64) -> BTreeMap<usize, f64> {
        let means: BTreeMap<usize, f64> = self
            .accumulated
            .iter()
            .map(|(&l, f)| (l, f.iter().sum::<f64>() / f.len().max(1) as f64))
            .collect();
        let max = means.values().copied().fold(0.0, f64::max);
        means
            .into_iter()
            .map(|(l, m)| (l, (kappa * m / (max + eps)).clamp(0.0, kappa)))
            .collect()
    }
}

/// Diagonal Fisher from the batch-mean gradient of the pseudo-label
/// log-likelihood, squared elementwise.
pub fn pseudo_label_fisher(net: &mut Network, batch: &FeatureBlock) -> Result<BTreeMap<usize, Vec<f64>>> {
    net.zero_grad();
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, batch.tensor(), BnMode::Batch)?;
    let pseudo = argmax_rows(tape.value(pass.logits));
    // Negative log-likelihood; the sign vanishes once squared.
    let nll = cross_entropy(&mut tape, pass.logits, &pseudo)?;
    net.backward(&tape, nll)?;
    let fisher = net
        .per_layer_grad_view()?
        .into_iter()
        .map(|(l, g)| (l, g.into_iter().map(|v| v * v).collect()))
        .collect();
    net.zero_grad();
    Ok(fisher)
}

pub fn law_step(net: &mut Network, state: &mut LawState, batch: &FeatureBlock, augmented: &FeatureBlock, params: &BaselineParams) -> Result<BaselineOutput> {
    let fisher = pseudo_label_fisher(net, batch)?;
    state.accumulate(fisher);
    let rates = state.layer_rates(params.lr, params.epsilon);
    for slot in net.slots_mut() {
        match rates.get(&slot.layer_index) {
            Some(&r) if r > 0.0 => slot.set_uniform_lr(r),
            _ => slot.freeze(),
        }
    }
    let n_updated = rates.values().filter(|&&r| r > 0.0).count();
    state.layer_rates = rates;
    let (predictions, ent, cons) = adapt_with_rates(net, batch, augmented, params)?;
    Ok(BaselineOutput {
        predictions,
        n_updated,
        loss_entropy: Some(ent),
        loss_consist: Some(cons),
    })
}
