use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmground::config::ModelConfig;
use mmground::data::{synthesize, SyntheticConfig};
use mmground::eval::evaluate;
use mmground::exec::Exec;
use mmground::model::Model;
use mmground::pipeline::Dataset;
use mmground::train::batch_gradients;

fn execs() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let corpus = synthesize(&SyntheticConfig {
        n_samples: 16,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let samples = Dataset::from_corpus(&corpus)
        .samples::<f32>(&cfg, None, Exec::Sequential)
        .unwrap();
    let (model, store) = Model::init::<f32>(&cfg, 0).unwrap();

    let mut g = c.benchmark_group("batch_gradients_b16");
    g.sample_size(10);
    for (name, exec) in execs() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(batch_gradients(&model, &store, &samples, exec).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_16");
    g.sample_size(10);
    for (name, exec) in execs() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate(&model, &store, &samples, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
