//! The adaptation mechanism: uncertainty scoring, layer selection,
//! sensitivity-driven learning rates and the adaptation objective.

mod config;
mod loss;
mod select;
mod sensitivity;
mod step;

pub use config::{ImportanceVariant, PNorm, PalmConfig, SensitivityInit};
pub use loss::{
    adaptation_loss, entropy, entropy_threshold, kl_to_uniform, mean_entropy, sample_cross_entropies,
    sample_entropies, uncertainty_loss, AdaptationLoss, UncertaintyLoss,
};
pub use select::{apply_selection, layer_scores, select_layers, Selection};
pub use sensitivity::{apply_lr, ema, ema_update, importance, sensitivity};
pub use step::{palm_step, PalmState, StepReport};
