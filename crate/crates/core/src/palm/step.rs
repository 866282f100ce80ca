use std::collections::BTreeMap;

use crate::error::Result;
use crate::network::{argmax_rows, BnMode, Network};
use crate::optim;
use crate::shift::FeatureBlock;
use crate::tape::Tape;

use super::config::PalmConfig;
use super::loss::{adaptation_loss, entropy_threshold, uncertainty_loss};
use super::select::{apply_selection, layer_scores, select_layers, Selection};
use super::sensitivity::{apply_lr, ema_update, importance, sensitivity};

/// Run-level bookkeeping. Per-parameter sensitivity averages live on the
/// network's slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PalmState {
    pub step: u64,
    pub selection: Selection,
    pub scores: BTreeMap<usize, f64>,
}

impl PalmState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub scores: BTreeMap<usize, f64>,
    pub selection: Selection,
    pub n_selected: usize,
    /// Divergence of the tempered softmax from uniform (diagnostic).
    pub loss_uncert: f64,
    /// Uniform-target cross-entropy that was backpropagated for scoring.
    pub loss_uncert_ce: f64,
    pub loss_entropy: f64,
    pub loss_consist: f64,
    pub loss_total: f64,
    /// Samples admitted by the entropy gate.
    pub admitted: usize,
    /// Mean importance of each selected layer.
    pub mean_importance: BTreeMap<usize, f64>,
    /// Argmax predictions of the clean forward pass.
    pub predictions: Vec<usize>,
}

/// One adaptation step on `batch`:
///
/// 1. backprop the tempered uniform-target cross-entropy and score each layer;
/// 2. freeze layers scoring above `eta`;
/// 3. for selected slots refresh sensitivity, its average, and `lr = kappa * importance`;
/// 4. backprop gated entropy plus weighted consistency against `augmented`;
/// 5. take one optimizer step on unfrozen slots.
///
/// Batch-norm layers normalize with current-batch statistics throughout.
pub fn palm_step(
    net: &mut Network,
    state: &mut PalmState,
    cfg: &PalmConfig,
    batch: &FeatureBlock,
    augmented: &FeatureBlock,
) -> Result<StepReport> {
    cfg.validate()?;

    net.zero_grad();
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, batch.tensor(), BnMode::Batch)?;
    let uncert = uncertainty_loss(&mut tape, pass.logits, cfg.temperature)?;
    net.backward(&tape, uncert.loss)?;
    let loss_uncert_ce = tape.value(uncert.loss).values()[0];

    let scores = layer_scores(net, cfg.p)?;
    let selection = select_layers(&scores, cfg.eta);
    apply_selection(net, &selection);

    let mut per_slot: Vec<Option<Vec<f64>>> = vec![None; net.slots().len()];
    for (idx, slot) in net.slots_mut().iter_mut().enumerate() {
        if slot.frozen {
            continue;
        }
        let s = sensitivity(slot)?;
        let s_hat = ema_update(slot, &s, cfg.alpha, cfg.sensitivity_init).to_vec();
        per_slot[idx] = Some(importance(&s, &s_hat, cfg.epsilon, cfg.variant));
    }

    let mut layer_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (slot, imp) in net.slots().iter().zip(&per_slot) {
        if let Some(imp) = imp {
            let e = layer_sums.entry(slot.layer_index).or_default();
            e.0 += imp.iter().sum::<f64>();
            e.1 += imp.len();
        }
    }
    let mean_importance: BTreeMap<usize, f64> = layer_sums
        .into_iter()
        .map(|(l, (sum, n))| (l, sum / n as f64))
        .collect();

    for (slot, imp) in net.slots_mut().iter_mut().zip(per_slot) {
        match imp {
            Some(imp) if cfg.aggregate_layer_mean => {
                let mean = mean_importance[&slot.layer_index];
                apply_lr(slot, &vec![mean; imp.len()], cfg.kappa);
            }
            Some(imp) => apply_lr(slot, &imp, cfg.kappa),
            None => slot.freeze(),
        }
    }

    net.zero_grad();
    let mut tape = Tape::new();
    let clean = net.forward(&mut tape, batch.tensor(), BnMode::Batch)?;
    let aug = net.forward(&mut tape, augmented.tensor(), BnMode::Batch)?;
    let h0 = entropy_threshold(net.classes(), cfg.entropy_gate_factor);
    let adapt = adaptation_loss(&mut tape, clean.logits, aug.logits, cfg.lambda, h0)?;
    net.backward(&tape, adapt.total)?;
    optim::step(net, cfg.optimizer)?;

    state.step += 1;
    state.selection = selection.clone();
    state.scores = scores.clone();

    Ok(StepReport {
        step: state.step,
        n_selected: selection.values().filter(|&&s| s).count(),
        scores,
        selection,
        loss_uncert: uncert.kl,
        loss_uncert_ce,
        loss_entropy: adapt.entropy,
        loss_consist: adapt.consistency,
        loss_total: tape.value(adapt.total).values()[0],
        admitted: adapt.admitted,
        mean_importance,
        predictions: argmax_rows(tape.value(clean.logits)),
    })
}
