use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const MAX_SEVERITY: u8 = 5;

const NOISE_STD_PER_LEVEL: f64 = 0.3;
const HEAVY_TAIL_SCALE_PER_LEVEL: f64 = 0.15;
const HEAVY_TAIL_DOF: f64 = 3.0;
const CONTRAST: [f64; 5] = [0.8, 0.65, 0.5, 0.35, 0.2];
const BIAS_SHIFT_PER_LEVEL: f64 = 0.8;
const BLUR_WINDOW: usize = 3;
/// Fraction of coordinates zeroed at the highest severity.
pub const MAX_DROPOUT_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussNoise,
    /// Moving average over the feature axis, blended in with the severity.
    FeatureBlur,
    /// Shrinks each sample towards its own feature mean.
    ContrastScale,
    #[serde(rename = "feature-dropout-mask")]
    FeatureDropout,
    #[serde(rename = "additive-bias-shift")]
    BiasShift,
    /// Scaled Student-t noise.
    HeavyTailNoise,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::GaussNoise,
        Family::FeatureBlur,
        Family::ContrastScale,
        Family::FeatureDropout,
        Family::BiasShift,
        Family::HeavyTailNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussNoise => "gauss-noise",
            Family::FeatureBlur => "feature-blur",
            Family::ContrastScale => "contrast-scale",
            Family::FeatureDropout => "feature-dropout-mask",
            Family::BiasShift => "additive-bias-shift",
            Family::HeavyTailNoise => "heavy-tail-noise",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown corruption family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub family: Family,
    /// 0 is the identity; 1..=5 increase in strength.
    pub severity: u8,
    pub seed: u64,
}

/// Applies `c` row by row. Randomness depends on `(seed, family)` only, so
/// all severities of a family share the same underlying draws.
pub fn corrupt(features: &Tensor, c: &Corruption) -> Result<Tensor> {
    let (rows, dim) = features
        .dims2()
        .ok_or_else(|| Error::InvalidTensor("corrupt expects a 2-D block".into()))?;
    if c.severity > MAX_SEVERITY {
        return Err(Error::InvalidConfig(format!(
            "severity {} exceeds {MAX_SEVERITY}",
            c.severity
        )));
    }
    if c.severity == 0 {
        return Ok(features.clone());
    }
    let level = c.severity as f64;
    let mut rng = seed::rng(seed::derive(c.seed, &[c.family.tag()]));
    let mut out = features.values().to_vec();

    match c.family {
        Family::GaussNoise => {
            let std = NOISE_STD_PER_LEVEL * level;
            for v in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += std * z;
            }
        }
        Family::HeavyTailNoise => {
            let t = StudentT::new(HEAVY_TAIL_DOF).expect("valid dof");
            let scale = HEAVY_TAIL_SCALE_PER_LEVEL * level;
            for v in out.iter_mut() {
                *v += scale * t.sample(&mut rng);
            }
        }
        Family::FeatureBlur => {
            let blend = level / MAX_SEVERITY as f64;
            let half = BLUR_WINDOW / 2;
            for row in out.chunks_mut(dim) {
                let orig = row.to_vec();
                for (k, v) in row.iter_mut().enumerate() {
                    let lo = k.saturating_sub(half);
                    let hi = (k + half + 1).min(dim);
                    let avg = orig[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                    *v = (1.0 - blend) * orig[k] + blend * avg;
                }
            }
        }
        Family::ContrastScale => {
            let factor = CONTRAST[c.severity as usize - 1];
            for row in out.chunks_mut(dim) {
                let mean = row.iter().sum::<f64>() / dim as f64;
                row.iter_mut().for_each(|v| *v = mean + factor * (*v - mean));
            }
        }
        Family::FeatureDropout => {
            // Expected fraction s/10; the integer part is exact, the
            // remainder is one extra coordinate with matching probability.
            let target = MAX_DROPOUT_FRACTION * level / MAX_SEVERITY as f64 * dim as f64;
            let whole = target.floor() as usize;
            let frac = target - whole as f64;
            let mut idx: Vec<usize> = (0..dim).collect();
            for row in out.chunks_mut(dim) {
                idx.shuffle(&mut rng);
                let u: f64 = rng.random();
                let count = (whole + usize::from(u < frac)).min(dim);
                for &k in &idx[..count] {
                    row[k] = 0.0;
                }
            }
        }
        Family::BiasShift => {
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let shift: Vec<f64> = dir.iter().map(|d| BIAS_SHIFT_PER_LEVEL * level * d / norm).collect();
            for row in out.chunks_mut(dim) {
                row.iter_mut().zip(&shift).for_each(|(v, s)| *v += s);
            }
        }
    }
    Tensor::matrix(rows, dim, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::make_clean;

    fn mean_displacement(x: &Tensor, y: &Tensor) -> f64 {
        let (rows, dim) = x.dims2().unwrap();
        let total: f64 = x
            .values()
            .chunks(dim)
            .zip(y.values().chunks(dim))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .sum();
        total / rows as f64
    }

    #[test]
    fn severity_zero_is_identity() {
        let d = make_clean(5, 8, 200, 0).unwrap();
        for family in Family::ALL {
            let c = Corruption { family, severity: 0, seed: 9 };
            assert_eq!(corrupt(&d.test_x, &c).unwrap(), d.test_x);
        }
    }

    #[test]
    fn displacement_strictly_increases_with_severity() {
        let d = make_clean(5, 8, 5000, 2).unwrap();
        let x = &d.test_x;
        assert_eq!(x.dims2().unwrap().0, 1000);
        for family in Family::ALL {
            let disp: Vec<f64> = (1..=MAX_SEVERITY)
                .map(|s| {
                    let c = Corruption { family, severity: s, seed: 4 };
                    mean_displacement(x, &corrupt(x, &c).unwrap())
                })
                .collect();
            assert!(disp[0] > 0.0, "{family}: {disp:?}");
            assert!(disp.windows(2).all(|w| w[1] > w[0]), "{family}: {disp:?}");
        }
    }

    #[test]
    fn dropout_at_max_severity_zeroes_half() {
        let x = Tensor::matrix(50, 8, vec![1.0; 400]).unwrap();
        let c = Corruption {
            family: Family::FeatureDropout,
            severity: 5,
            seed: 1,
        };
        let y = corrupt(&x, &c).unwrap();
        for row in y.values().chunks(8) {
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 4);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let d = make_clean(3, 4, 100, 0).unwrap();
        for family in Family::ALL {
            let c = Corruption { family, severity: 3, seed: 77 };
            assert_eq!(corrupt(&d.test_x, &c).unwrap(), corrupt(&d.test_x, &c).unwrap());
        }
    }

    #[test]
    fn names_round_trip() {
        for family in Family::ALL {
            assert_eq!(family.name().parse::<Family>().unwrap(), family);
            let json = serde_json::to_string(&family).unwrap();
            assert_eq!(json, format!("\"{}\"", family.name()));
        }
        assert!("snow".parse::<Family>().is_err());
    }

    #[test]
    fn severity_above_max_rejected() {
        let x = Tensor::zeros(vec![2, 2]);
        let c = Corruption {
            family: Family::GaussNoise,
            severity: 6,
            seed: 0,
        };
        assert!(corrupt(&x, &c).is_err());
    }
}
