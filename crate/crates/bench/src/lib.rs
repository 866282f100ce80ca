//! Shared fixtures for the benchmarks.

use palm_core::shift::{make_clean, CleanDataset};
use palm_core::{build_mlp, Network};

/// Desk-scale dataset and an untrained network of the default shape.
pub fn desk_fixture() -> (CleanDataset, Network) {
    let dataset = make_clean(5, 8, 5000, 0).expect("valid dataset parameters");
    let net = build_mlp(8, &[32, 32, 32], 5, 1).expect("valid network shape");
    (dataset, net)
}
