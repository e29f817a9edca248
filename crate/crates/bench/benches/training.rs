use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use icl_bench::{in_domain, perturbed_identity};
use icl_core::training::{sample_training_batch, train_on_batch};
use icl_core::{Rng, TrainConfig};

fn gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_gradient");
    for prompts in [1000usize, 5000] {
        let ctx = in_domain(5, 256);
        let batch = sample_training_batch(&ctx, prompts, 256, &Rng::new(1, 1)).unwrap();
        let theta = perturbed_identity(5, 2);
        group.bench_with_input(BenchmarkId::from_parameter(prompts), &prompts, |b, _| {
            b.iter(|| batch.loss_and_gradient(black_box(&theta)))
        });
    }
    group.finish();
}

fn descent(c: &mut Criterion) {
    let ctx = in_domain(5, 256);
    let batch = sample_training_batch(&ctx, 1000, 256, &Rng::new(1, 1)).unwrap();
    let mut cfg = TrainConfig::new(5, 1000, 256, 10.0);
    cfg.max_iterations = 20;
    let init = perturbed_identity(5, 3);
    let rng = Rng::new(1, 0);
    c.bench_function("train_on_batch/20 iterations", |b| {
        b.iter(|| train_on_batch(&cfg, &batch, black_box(init.clone()), &rng).unwrap())
    });
}

criterion_group!(benches, gradient, descent);
criterion_main!(benches);
