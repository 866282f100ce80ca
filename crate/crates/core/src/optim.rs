//! Per-parameter-rate optimizers. The rate of each element comes from
//! `ParamSlot::lr`; frozen slots are skipped entirely, moments included.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, ParamSlot};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub fn step_slot(slot: &mut ParamSlot, kind: OptimizerKind) -> Result<()> {
    if slot.frozen {
        return Ok(());
    }
    let grad = slot.grad()?.to_vec();
    let ParamSlot { tensor, lr, adam, .. } = slot;
    let theta = tensor.values_mut();
    match kind {
        OptimizerKind::Sgd => {
            for ((t, g), r) in theta.iter_mut().zip(&grad).zip(lr.iter()) {
                *t -= r * g;
            }
        }
        OptimizerKind::Adam => {
            adam.step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(adam.step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(adam.step as i32);
            for i in 0..theta.len() {
                let g = grad[i];
                adam.m[i] = ADAM_BETA1 * adam.m[i] + (1.0 - ADAM_BETA1) * g;
                adam.v[i] = ADAM_BETA2 * adam.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = adam.m[i] / bc1;
                let v_hat = adam.v[i] / bc2;
                theta[i] -= lr[i] * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    if theta.iter().all(|t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "optimizer step" })
    }
}

pub fn step(net: &mut Network, kind: OptimizerKind) -> Result<()> {
    for slot in net.slots_mut() {
        step_slot(slot, kind)?;
    }
    Ok(())
}
