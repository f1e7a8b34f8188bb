//! Sequential vs rayon-parallel execution of the two data-parallel hot
//! paths: one training step (per-sample forward/backward) and a correlation
//! report (per-code walks).
//!
//! "sequential" runs inside a one-thread pool, where `map_indexed` takes its
//! plain-iterator path; "parallel" uses a pool with one thread per core (at
//! least two). Outputs are bit-identical between the two.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use warpspace::eval;
use warpspace::trainer::{TrainConfig, Trainer};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let cores = std::thread::available_parallelism()
        .map_or(2, |n| n.get())
        .max(2);
    [
        ("sequential".to_string(), 1),
        (format!("parallel-{cores}"), cores),
    ]
    .into_iter()
    .map(|(name, n)| {
        (
            name,
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .unwrap(),
        )
    })
    .collect()
}

fn train_step(c: &mut Criterion) {
    let cfg = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_step_batch32");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(&name, |b| {
            b.iter_batched(
                || {
                    let mut t = Trainer::new(cfg.clone()).unwrap();
                    let batch = t.sample_batch();
                    (t, batch)
                },
                |(mut t, batch)| pool.install(|| black_box(t.train_step(batch).unwrap())),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn correlation(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let gen = warpspace::generator::SyntheticGenerator::new(cfg.generator_config()).unwrap();
    let net = cfg.build_network().unwrap();
    let mut group = c.benchmark_group("correlation_report_50codes");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(&name, |b| {
            b.iter(|| {
                pool.install(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1);
                    black_box(eval::correlation_report(&net, &gen, 50, 10, 1.0, &mut rng).unwrap())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, correlation);
criterion_main!(benches);
