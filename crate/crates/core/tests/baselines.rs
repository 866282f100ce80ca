use std::sync::OnceLock;

use palm_core::baselines::{
    bn_stats_step, law_step, pseudo_label_fisher, source_step, surgical_layers, surgical_step, tent_step,
};
use palm_core::network::argmax_rows;
use palm_core::shift::{gather_rows, make_clean, CleanDataset};
use palm_core::train::{error_rate, train_source, TrainOptions};
use palm_core::{build_mlp, seed, BaselineParams, BnMode, FeatureBlock, LawState, Network, Tensor};
use rand::seq::SliceRandom;

struct Fixture {
    dataset: CleanDataset,
    source: Network,
}

/// The default desk-scale dataset and its trained source model.
fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dataset = make_clean(5, 8, 5000, 0).unwrap();
        let mut source = build_mlp(8, &[32, 32, 32], 5, 1).unwrap();
        train_source(&mut source, &dataset.train_x, &dataset.train_y, &TrainOptions::default()).unwrap();
        Fixture { dataset, source }
    })
}

fn test_batch(seed_value: u64, size: usize) -> FeatureBlock {
    let d = &fixture().dataset;
    let mut order: Vec<usize> = (0..d.n_test()).collect();
    order.shuffle(&mut seed::rng(seed_value));
    FeatureBlock::new(gather_rows(&d.test_x, &order[..size])).unwrap()
}

fn jittered(batch: &FeatureBlock, scale: f64) -> FeatureBlock {
    let t = batch.tensor();
    let (rows, cols) = t.dims2().unwrap();
    let v = t.values().iter().enumerate().map(|(i, x)| x + scale * ((i * 37 % 11) as f64 - 5.0)).collect();
    FeatureBlock::new(Tensor::matrix(rows, cols, v).unwrap()).unwrap()
}

fn layer_bits(net: &Network, keep: impl Fn(usize) -> bool) -> Vec<u64> {
    net.slots()
        .iter()
        .filter(|s| keep(s.layer_index))
        .flat_map(|s| s.tensor.values().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn source_model_reaches_clean_accuracy() {
    let f = fixture();
    let err = error_rate(&f.source, &f.dataset.test_x, &f.dataset.test_y, BnMode::Running).unwrap();
    assert!(err < 0.05, "clean error {err}");
}

#[test]
fn zero_epochs_leave_initialization() {
    let d = make_clean(3, 4, 300, 2).unwrap();
    let init = build_mlp(4, &[8], 3, 5).unwrap();
    let mut net = init.clone();
    let opts = TrainOptions {
        epochs: 0,
        ..TrainOptions::default()
    };
    assert_eq!(train_source(&mut net, &d.train_x, &d.train_y, &opts).unwrap(), None);
    assert_eq!(net.snapshot(), init.snapshot());
}

#[test]
fn training_is_deterministic() {
    let d = make_clean(3, 4, 300, 2).unwrap();
    let train = || {
        let mut net = build_mlp(4, &[8], 3, 5).unwrap();
        let opts = TrainOptions {
            epochs: 5,
            batch_size: 32,
            ..TrainOptions::default()
        };
        train_source(&mut net, &d.train_x, &d.train_y, &opts).unwrap();
        net.snapshot()
    };
    assert_eq!(train(), train());
}

#[test]
fn two_well_separated_classes_are_linearly_separable() {
    // 2000 held-out samples keep the binomial noise on a ~1% error well
    // under the bound.
    for s in 0..3 {
        let d = make_clean(2, 8, 10_000, s).unwrap();
        let mut head = build_mlp(8, &[], 2, s).unwrap();
        let opts = TrainOptions {
            epochs: 20,
            lr: 1e-2,
            batch_size: 64,
            seed: s,
        };
        train_source(&mut head, &d.train_x, &d.train_y, &opts).unwrap();
        let err = error_rate(&head, &d.test_x, &d.test_y, BnMode::Running).unwrap();
        assert!(err < 0.02, "seed {s}: {err}");
    }
}

#[test]
fn source_step_is_pure_inference() {
    let net = fixture().source.clone();
    let before = net.snapshot();
    let batch = test_batch(1, 64);
    let a = source_step(&net, &batch).unwrap();
    let b = source_step(&net, &batch).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(net.snapshot(), before);
    let f = fixture();
    let all = FeatureBlock::new(f.dataset.test_x.clone()).unwrap();
    let preds = source_step(&net, &all).unwrap().predictions;
    let wrong = preds.iter().zip(&f.dataset.test_y).filter(|(p, y)| p != y).count();
    let clean = error_rate(&net, &f.dataset.test_x, &f.dataset.test_y, BnMode::Running).unwrap();
    assert_eq!(wrong as f64 / preds.len() as f64, clean);
}

#[test]
fn batch_statistics_track_running_statistics_on_source_data() {
    let net = &fixture().source;
    for s in 0..5 {
        let batch = test_batch(100 + s, 200);
        let running = net.logits(batch.tensor(), BnMode::Running).unwrap();
        let batch_mode = net.logits(batch.tensor(), BnMode::Batch).unwrap();
        let scale = running.values().iter().map(|v| v.abs()).sum::<f64>() / running.len() as f64;
        let diff = running
            .values()
            .iter()
            .zip(batch_mode.values())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / running.len() as f64;
        assert!(diff < 0.1 * scale, "seed {s}: mean |diff| {diff} vs scale {scale}");
        assert_eq!(bn_stats_step(net, &batch).unwrap().predictions, argmax_rows(&batch_mode));
    }
}

#[test]
fn bn_stats_leaves_parameters_alone() {
    let net = fixture().source.clone();
    let before = net.snapshot();
    bn_stats_step(&net, &test_batch(3, 50)).unwrap();
    assert_eq!(net.snapshot(), before);
}

#[test]
fn tent_touches_only_normalization_layers() {
    let mut net = fixture().source.clone();
    let bn = net.batch_norm_layers();
    let others = layer_bits(&net, |l| !bn.contains(&l));
    let bn_before = layer_bits(&net, |l| bn.contains(&l));
    let params = BaselineParams::default();
    for s in 0..3 {
        tent_step(&mut net, &jittered(&test_batch(s, 64), 0.3), &params).unwrap();
    }
    assert_eq!(layer_bits(&net, |l| !bn.contains(&l)), others);
    assert_ne!(layer_bits(&net, |l| bn.contains(&l)), bn_before);
}

#[test]
fn zero_rate_changes_nothing() {
    let batch = jittered(&test_batch(4, 64), 0.3);
    let zero = BaselineParams {
        lr: 0.0,
        ..BaselineParams::default()
    };
    let mut net = fixture().source.clone();
    let before = net.clone();
    tent_step(&mut net, &batch, &zero).unwrap();
    surgical_step(&mut net, &batch, &jittered(&batch, 0.01), &zero).unwrap();
    for (a, b) in net.slots().iter().zip(before.slots()) {
        assert_eq!(a.tensor.values(), b.tensor.values());
        assert_eq!(a.adam, b.adam);
    }
    assert_eq!(net.snapshot(), before.snapshot());
}

#[test]
fn confident_batch_barely_moves_tent() {
    let mut net = build_mlp(2, &[4], 3, 0).unwrap();
    // Scale the head so every prediction is one-hot to machine precision.
    let head = net.trainable_layers() - 1;
    for slot in net.slots_mut().iter_mut().filter(|s| s.layer_index == head) {
        for (i, v) in slot.tensor.values_mut().iter_mut().enumerate() {
            *v = if slot.name == "bias" { [400.0, 0.0, 0.0][i] } else { 0.0 };
        }
    }
    let before = net.clone();
    let batch = FeatureBlock::new(Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.5, 1.0, -1.0, 0.0, 0.4]).unwrap()).unwrap();
    let out = tent_step(&mut net, &batch, &BaselineParams::default()).unwrap();
    assert!(out.loss_entropy.unwrap() < 1e-12);
    for (a, b) in net.slots().iter().zip(before.slots()) {
        for (x, y) in a.tensor.values().iter().zip(b.tensor.values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn surgical_keeps_later_layers_fixed() {
    let mut net = fixture().source.clone();
    assert_eq!(surgical_layers(&net), vec![0, 1]);
    let later = layer_bits(&net, |l| l >= 2);
    let first = layer_bits(&net, |l| l < 2);
    let params = BaselineParams {
        entropy_gate_factor: 10.0,
        ..BaselineParams::default()
    };
    for s in 0..3 {
        let batch = jittered(&test_batch(10 + s, 64), 0.3);
        surgical_step(&mut net, &batch, &jittered(&batch, 0.02), &params).unwrap();
    }
    assert_eq!(layer_bits(&net, |l| l >= 2), later);
    assert_ne!(layer_bits(&net, |l| l < 2), first);
}

#[test]
fn law_first_accumulation_equals_current_fisher() {
    let mut net = fixture().source.clone();
    let batch = jittered(&test_batch(20, 64), 0.3);
    let fisher = pseudo_label_fisher(&mut net.clone(), &batch).unwrap();
    let mut state = LawState::new();
    law_step(&mut net, &mut state, &batch, &jittered(&batch, 0.02), &BaselineParams::default()).unwrap();
    assert_eq!(state.steps, 1);
    assert_eq!(state.accumulated, fisher);
    assert_eq!(state.current, fisher);
    let top = state.layer_rates.values().copied().fold(0.0, f64::max);
    assert!(top > 0.0 && top <= BaselineParams::default().lr);
}

#[test]
fn law_frozen_layers_stay_fixed() {
    let mut net = fixture().source.clone();
    let mut state = LawState::new();
    for s in 0..3 {
        let before = net.clone();
        let batch = jittered(&test_batch(30 + s, 64), 0.3);
        law_step(&mut net, &mut state, &batch, &jittered(&batch, 0.02), &BaselineParams::default()).unwrap();
        for (a, b) in net.slots().iter().zip(before.slots()) {
            if a.frozen {
                assert_eq!(a.tensor.values(), b.tensor.values());
                assert_eq!(a.adam, b.adam);
            }
        }
    }
}
