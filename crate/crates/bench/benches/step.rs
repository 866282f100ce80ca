use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use palm_bench::desk_fixture;
use palm_core::baselines::tent_step;
use palm_core::shift::{build_ctta, Augmenter, Family};
use palm_core::{palm_step, BaselineParams, BnMode, PalmConfig, PalmState, Tape};
use std::hint::black_box;

fn steps(c: &mut Criterion) {
    let (dataset, net) = desk_fixture();
    let scenario = build_ctta(&dataset, &Family::ALL, 100, 0).unwrap();
    let batch = &scenario.batches[0].features;
    let augmented = Augmenter::from_dataset(&dataset, 0).augment(batch, 0);

    c.bench_function("forward_backward", |b| {
        let mut net = net.clone();
        b.iter(|| {
            net.zero_grad();
            let mut tape = Tape::new();
            let pass = net.forward(&mut tape, batch.tensor(), BnMode::Batch).unwrap();
            let loss = palm_core::palm::mean_entropy(&mut tape, pass.logits).unwrap();
            net.backward(&tape, loss).unwrap();
            black_box(&net);
        })
    });

    let cfg = PalmConfig::default();
    c.bench_function("palm_step", |b| {
        b.iter_batched(
            || (net.clone(), PalmState::new()),
            |(mut net, mut state)| palm_step(&mut net, &mut state, &cfg, batch, &augmented).unwrap(),
            BatchSize::SmallInput,
        )
    });

    let params = BaselineParams::default();
    c.bench_function("tent_step", |b| {
        b.iter_batched(
            || net.clone(),
            |mut net| tent_step(&mut net, batch, &params).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, steps);
criterion_main!(benches);
