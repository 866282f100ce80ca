//! Continual test-time adaptation with uncertainty-gated layer selection and
//! sensitivity-driven per-parameter learning rates, plus a synthetic
//! distribution-shift benchmark to exercise it.

pub mod baselines;
pub mod error;
pub mod network;
pub mod optim;
pub mod palm;
pub mod seed;
pub mod shift;
pub mod tape;
pub mod tensor;
pub mod train;

pub use baselines::{BaselineKind, BaselineParams, LawState};
pub use error::{Error, Result};
pub use network::{build_mlp, BnMode, Network, NetworkSnapshot, ParamSlot};
pub use optim::OptimizerKind;
pub use palm::{palm_step, PalmConfig, PalmState, StepReport};
pub use shift::{FeatureBlock, HiddenLabels, StreamScenario};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
