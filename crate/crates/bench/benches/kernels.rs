use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use gems_bench::fixture;
use gems_core::experiment::{init_model, make_dataset, new_optimizer, prompt_format, sample_batch, to_sample};
use gems_core::gems::{train_step, GemsConfig};
use gems_core::harness::data::Task;
use gems_core::linalg::{svd, truncated_basis};
use gems_core::rng::SeedStreams;
use gems_core::subspace::{SubspaceConfig, SubspaceKind, SubspaceState};
use gems_core::config::RunConfig;

fn bench_svd(c: &mut Criterion) {
    for (m, n) in [(16, 64), (64, 64)] {
        let a = fixture(m, n, 1);
        c.bench_function(&format!("svd {m}x{n}"), |b| b.iter(|| svd(black_box(&a)).unwrap()));
    }
    let a = fixture(64, 128, 2);
    c.bench_function("truncated basis 64x128 r8", |b| b.iter(|| truncated_basis(black_box(&a), 8).unwrap()));
}

fn bench_subspace_step(c: &mut Criterion) {
    let g = fixture(64, 128, 3);
    let defaults = GemsConfig::default();
    let config = SubspaceConfig {
        rank: 8,
        refresh_every: defaults.refresh_every,
        scale: defaults.scale,
        adam: defaults.adam,
        reset_moments_on_refresh: false,
    };
    let mut state = SubspaceState::new(SubspaceKind::Shared, 64, 128, config).unwrap();
    // First step pays for the SVD; measure the steady state in between refreshes.
    state.step(&g).unwrap();
    c.bench_function("subspace adam step 64x128 r8", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| s.step(black_box(&g)).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn bench_train_step(c: &mut Criterion) {
    let config = RunConfig::default();
    let dataset = make_dataset(&config).unwrap();
    let format = prompt_format(&config);
    let pick = |t: Task| {
        dataset
            .train
            .iter()
            .filter(|r| r.task == t)
            .map(|r| to_sample(&format, r))
            .collect::<Vec<_>>()
    };
    let (src, rec) = (pick(Task::Src), pick(Task::Rec));
    let mut rng = SeedStreams::new(0).stream(SeedStreams::BATCHING);
    let batch = sample_batch(&src, &rec, 16, 0.5, &mut rng);
    let model = init_model(&config).unwrap();
    let opt = new_optimizer(&config, &model, None).unwrap();
    let mut group = c.benchmark_group("train step");
    group.sample_size(10);
    group.bench_function("full gems, batch 16", |b| {
        b.iter_batched(
            || (model.clone(), opt.clone()),
            |(mut m, mut o)| train_step(&mut m, black_box(&batch), &mut o).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_svd, bench_subspace_step, bench_train_step);
criterion_main!(benches);
