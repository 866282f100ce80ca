use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;

/// Order of the norm used to score a layer's uncertainty gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum PNorm {
    /// Count of nonzero components.
    Zero,
    Finite(f64),
    Infinity,
}

impl PNorm {
    pub const SUPPORTED: [f64; 8] = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, f64::INFINITY];

    pub fn new(p: f64) -> Result<Self> {
        if p == 0.0 {
            Ok(PNorm::Zero)
        } else if p == f64::INFINITY {
            Ok(PNorm::Infinity)
        } else if Self::SUPPORTED.contains(&p) {
            Ok(PNorm::Finite(p))
        } else {
            Err(Error::UnsupportedNorm(p))
        }
    }

    pub fn order(self) -> f64 {
        match self {
            PNorm::Zero => 0.0,
            PNorm::Finite(p) => p,
            PNorm::Infinity => f64::INFINITY,
        }
    }

    /// `(sum |g_i|^p)^(1/p)`; `p = 0` counts nonzeros and `p = inf` takes the max.
    pub fn norm(self, g: &[f64]) -> f64 {
        match self {
            PNorm::Zero => g.iter().filter(|v| **v != 0.0).count() as f64,
            PNorm::Infinity => g.iter().fold(0.0, |m, v| f64::max(m, v.abs())),
            PNorm::Finite(1.0) => g.iter().map(|v| v.abs()).sum(),
            PNorm::Finite(p) => g.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p),
        }
    }
}

impl TryFrom<f64> for PNorm {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        PNorm::new(p)
    }
}

impl From<PNorm> for f64 {
    fn from(p: PNorm) -> f64 {
        p.order()
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PNorm::Infinity => write!(f, "inf"),
            p => write!(f, "{}", p.order()),
        }
    }
}

/// Learning-rate importance formula. Numbering follows the ablation table:
/// 1 is the proposed deviation/sensitivity ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ImportanceVariant {
    /// `D / S`
    #[default]
    Ratio,
    /// `D * S`
    Product,
    /// `S`
    Sensitivity,
    /// `1 / S`
    InverseSensitivity,
    /// `D`
    Deviation,
    /// `S / D`
    InverseRatio,
}

impl ImportanceVariant {
    pub const ALL: [ImportanceVariant; 6] = [
        ImportanceVariant::Ratio,
        ImportanceVariant::Product,
        ImportanceVariant::Sensitivity,
        ImportanceVariant::InverseSensitivity,
        ImportanceVariant::Deviation,
        ImportanceVariant::InverseRatio,
    ];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

impl TryFrom<u8> for ImportanceVariant {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1..=6 => Ok(Self::ALL[v as usize - 1]),
            _ => Err(Error::UnknownVariant(v)),
        }
    }
}

impl From<ImportanceVariant> for u8 {
    fn from(v: ImportanceVariant) -> u8 {
        v.number()
    }
}

/// Starting value of the sensitivity moving average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityInit {
    /// The first observed sensitivity (zero deviation on the first update).
    #[default]
    FirstSelected,
    /// Zero, so the first update is `alpha * S`.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PalmConfig {
    /// Base learning rate.
    pub kappa: f64,
    /// Weight of the current sensitivity in the moving average.
    pub alpha: f64,
    /// Logit temperature for the uncertainty loss.
    pub temperature: f64,
    /// Layers with score `<= eta` are adapted.
    pub eta: f64,
    /// Consistency-loss weight.
    pub lambda: f64,
    pub epsilon: f64,
    pub p: PNorm,
    pub variant: ImportanceVariant,
    pub optimizer: OptimizerKind,
    /// Entropy gate is `entropy_gate_factor * ln C`.
    pub entropy_gate_factor: f64,
    pub sensitivity_init: SensitivityInit,
    /// Replace elementwise importance by its per-layer mean.
    pub aggregate_layer_mean: bool,
}

impl Default for PalmConfig {
    fn default() -> Self {
        Self {
            kappa: 5e-4,
            alpha: 0.5,
            temperature: 50.0,
            eta: 0.05,
            lambda: 0.01,
            epsilon: 1e-8,
            p: PNorm::Finite(1.0),
            variant: ImportanceVariant::Ratio,
            optimizer: OptimizerKind::Adam,
            entropy_gate_factor: 0.4,
            sensitivity_init: SensitivityInit::FirstSelected,
            aggregate_layer_mean: false,
        }
    }
}

impl PalmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("kappa must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.eta.is_nan() || self.eta < 0.0 {
            return bad("eta must be >= 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.entropy_gate_factor >= 0.0 && self.entropy_gate_factor.is_finite()) {
            return bad("entropy_gate_factor must be >= 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_examples() {
        assert_eq!(PNorm::new(1.0).unwrap().norm(&[0.5, -0.5]), 1.0);
        assert_eq!(PNorm::new(2.0).unwrap().norm(&[3.0, 4.0]), 5.0);
        assert_eq!(PNorm::new(0.0).unwrap().norm(&[0.0, 2.0, -1.0]), 2.0);
        assert_eq!(PNorm::new(f64::INFINITY).unwrap().norm(&[0.0, 2.0, -1.0]), 2.0);
        assert_eq!(PNorm::new(0.5).unwrap().norm(&[1.0, 4.0]), 9.0);
    }

    #[test]
    fn unsupported_orders_rejected() {
        for p in [-1.0, 0.25, 1.5, 6.0, f64::NAN] {
            assert!(PNorm::new(p).is_err(), "{p}");
        }
        for p in PNorm::SUPPORTED {
            assert_eq!(PNorm::new(p).unwrap().order(), p);
        }
    }

    #[test]
    fn variant_numbering() {
        for n in 1..=6u8 {
            assert_eq!(ImportanceVariant::try_from(n).unwrap().number(), n);
        }
        assert!(ImportanceVariant::try_from(0).is_err());
        assert!(ImportanceVariant::try_from(7).is_err());
    }

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = PalmConfig::default();
        assert_eq!(cfg.kappa, 5e-4);
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!(cfg.p, PNorm::Finite(1.0));
        assert_eq!(cfg.variant, ImportanceVariant::Ratio);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.entropy_gate_factor, 0.4);
        assert_eq!(cfg.epsilon, 1e-8);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_catches_out_of_range_values() {
        let mut cfg = PalmConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.5;
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        cfg.temperature = 1.0;
        cfg.eta = f64::INFINITY;
        cfg.validate().unwrap();
    }
}
