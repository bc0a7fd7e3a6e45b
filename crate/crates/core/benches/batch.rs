//! Sequential vs rayon-parallel execution of the batch workloads.

use std::hint::black_box;

use adasep::baseline::{easi_run, EasiConfig};
use adasep::model::{generate_dataset, GeneratorConfig};
use adasep::train::{sequence_loss, test_mse};
use adasep::unrolled::{DeepEasiParams, NetConfig};
use adasep::baseline::InitSpec;
use adasep::loss::LossConfig;
use adasep::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn generator() -> GeneratorConfig {
    GeneratorConfig { m: 3, l: 3, len: 300, seed: 1, ..Default::default() }
}

fn dataset_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_dataset");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(generate_dataset(&generator(), 64, exec).unwrap()))
        });
    }
    g.finish();
}

fn baseline_batch(c: &mut Criterion) {
    let data = generate_dataset(&generator(), 32, Exec::Sequential).unwrap();
    let cfg = EasiConfig::default();
    let mut g = c.benchmark_group("easi_batch");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(exec.map(&data, |_, inst| easi_run(inst, &cfg).unwrap())))
        });
    }
    g.finish();
}

fn gradient_batch(c: &mut Criterion) {
    let data = generate_dataset(&GeneratorConfig { len: 100, ..generator() }, 16, Exec::Sequential).unwrap();
    let net = DeepEasiParams::new(3, &NetConfig::default()).unwrap();
    let init = InitSpec::default();
    let mut g = c.benchmark_group("deep_easi_gradients");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                black_box(exec.map(&data, |_, inst| sequence_loss(&net, inst, &LossConfig::Mse, &init, true).unwrap()))
            })
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let data = generate_dataset(&generator(), 16, Exec::Sequential).unwrap();
    let net = DeepEasiParams::new(3, &NetConfig::default()).unwrap();
    let mut g = c.benchmark_group("deep_easi_test_mse");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(test_mse(&net, &data, &InitSpec::default(), exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, dataset_generation, baseline_batch, gradient_batch, evaluation);
criterion_main!(benches);
