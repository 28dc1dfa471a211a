use criterion::{black_box, criterion_group, criterion_main, Criterion};
use crop_bench::fixture;
use crop_core::pruning::{prune, PruneConfig, PruneStrategy};
use crop_core::{backward, crop_personalize, gip, tolerated_prune, MetricKind, Regularizer, TrainConfig};

fn forward_backward(c: &mut Criterion) {
    let (_, data, model) = fixture(1);
    let batch = data.for_user("g0").for_context("c0");
    let cfg = TrainConfig {
        alpha: 0.01,
        regularizer: Regularizer::L1,
        ..TrainConfig::default()
    };
    c.bench_function("backward_160_rows", |b| {
        b.iter(|| backward(black_box(&model), &batch, &cfg, None).unwrap())
    });
}

fn pruning(c: &mut Criterion) {
    let (cfg, data, model) = fixture(2);
    c.bench_function("prune_half_magnitude_low", |b| {
        b.iter(|| prune(black_box(&model), 0.5, PruneStrategy::MagnitudeLow, None).unwrap())
    });
    let val = data.for_user("p0").for_context("c0");
    let pc = PruneConfig::default();
    c.bench_function("tolerated_prune_grid", |b| {
        b.iter(|| tolerated_prune(black_box(&model), &pc, &val, cfg.metric).unwrap())
    });
}

fn diagnostics(c: &mut Criterion) {
    let (_, data, model) = fixture(3);
    let user = data.for_user("p0");
    let (a, u) = (user.for_context("c0"), user.for_context("c1"));
    c.bench_function("gip_two_contexts", |b| b.iter(|| gip(black_box(&model), &[&a, &u]).unwrap()));
}

fn pipeline(c: &mut Criterion) {
    let (cfg, data, model) = fixture(4);
    let pool = data.for_user("p0").for_context("c0");
    let mut crop = cfg.crop.clone();
    crop.metric = MetricKind::Accuracy;
    crop.train_initial.epochs = 10;
    crop.train_final.epochs = 10;
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("crop_one_user_10_epochs", |b| {
        b.iter(|| crop_personalize(black_box(&model), &pool, &crop).unwrap())
    });
    group.finish();
}

criterion_group!(benches, forward_backward, pruning, diagnostics, pipeline);
criterion_main!(benches);
