//! Parameter sensitivity, its moving average, and learning-rate importance.

use crate::error::Result;
use crate::network::ParamSlot;

use super::config::{ImportanceVariant, SensitivityInit};

/// First-order estimate of the loss change from zeroing each parameter:
/// `|theta * grad|`.
pub fn sensitivity(slot: &ParamSlot) -> Result<Vec<f64>> {
    let g = slot.grad()?;
    Ok(slot
        .tensor
        .values()
        .iter()
        .zip(g)
        .map(|(t, g)| (t * g).abs())
        .collect())
}

/// `alpha * current + (1 - alpha) * previous`.
pub fn ema(previous: &[f64], current: &[f64], alpha: f64) -> Vec<f64> {
    previous
        .iter()
        .zip(current)
        .map(|(p, c)| alpha * c + (1.0 - alpha) * p)
        .collect()
}

/// Updates the slot's domain-level sensitivity with `s` and returns it.
pub fn ema_update<'a>(slot: &'a mut ParamSlot, s: &[f64], alpha: f64, init: SensitivityInit) -> &'a [f64] {
    let next = match (&slot.sensitivity_ema, init) {
        (Some(prev), _) => ema(prev, s, alpha),
        (None, SensitivityInit::FirstSelected) => s.to_vec(),
        (None, SensitivityInit::Zero) => ema(&vec![0.0; s.len()], s, alpha),
    };
    slot.sensitivity_ema.insert(next)
}

/// Learning-rate multiplier from current sensitivity `s` and its average
/// `s_hat`, with `eps` on every numerator and denominator.
pub fn importance(s: &[f64], s_hat: &[f64], eps: f64, variant: ImportanceVariant) -> Vec<f64> {
    s.iter()
        .zip(s_hat)
        .map(|(&s, &sh)| {
            let d = (s - sh).abs() + eps;
            let sh = sh + eps;
            match variant {
                ImportanceVariant::Ratio => d / sh,
                ImportanceVariant::Product => d * sh,
                ImportanceVariant::Sensitivity => sh,
                ImportanceVariant::InverseSensitivity => 1.0 / sh,
                ImportanceVariant::Deviation => d,
                ImportanceVariant::InverseRatio => sh / d,
            }
        })
        .collect()
}

/// Sets the per-element rate to `kappa * importance`. Frozen slots keep zero.
pub fn apply_lr(slot: &mut ParamSlot, importance: &[f64], kappa: f64) {
    if slot.frozen {
        slot.lr.iter_mut().for_each(|r| *r = 0.0);
        return;
    }
    for (r, i) in slot.lr.iter_mut().zip(importance) {
        *r = kappa * i;
    }
}
