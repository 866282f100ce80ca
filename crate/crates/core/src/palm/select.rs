//! Gradient-norm layer scoring and threshold selection.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::network::Network;

use super::config::PNorm;

/// Per-layer selection flags, keyed by trainable layer index.
pub type Selection = BTreeMap<usize, bool>;

/// `Z_n = ||g_n||_p` over each layer's flat uncertainty gradient.
pub fn layer_scores(net: &Network, p: PNorm) -> Result<BTreeMap<usize, f64>> {
    Ok(net
        .per_layer_grad_view()?
        .into_iter()
        .map(|(layer, g)| (layer, p.norm(&g)))
        .collect())
}

/// A layer is adapted iff its score is at most `eta`.
pub fn select_layers(scores: &BTreeMap<usize, f64>, eta: f64) -> Selection {
    scores.iter().map(|(&layer, &z)| (layer, z <= eta)).collect()
}

/// Freezes every slot of an unselected layer and unfreezes the rest.
pub fn apply_selection(net: &mut Network, selection: &Selection) {
    for slot in net.slots_mut() {
        if selection.get(&slot.layer_index).copied().unwrap_or(false) {
            slot.unfreeze();
        } else {
            slot.freeze();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let scores = BTreeMap::from([(0, 0.4), (1, 1.2)]);
        assert_eq!(select_layers(&scores, 1.0), BTreeMap::from([(0, true), (1, false)]));
        assert!(select_layers(&scores, 0.0).values().all(|s| !s));
        assert!(select_layers(&scores, f64::INFINITY).values().all(|&s| s));
        // Boundary is inclusive.
        assert!(select_layers(&scores, 0.4)[&0]);
    }
}
