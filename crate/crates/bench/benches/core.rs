use std::hint::black_box;

use cats_core::data::{batch_and_pad, training_windows};
use cats_core::model::{ModelConfig, ModelParams, Network, Variant};
use cats_core::pipeline::{infer_with, pk_metric, synth_corpus, SynthSpec};
use cats_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_config() -> ModelConfig {
    ModelConfig {
        k: 8,
        t: 12,
        d_p: 4,
        n_tt: 2,
        n_ts: 2,
        heads: 2,
        ff_dim: 64,
        ..ModelConfig::for_variant(Variant::Cats, 16)
    }
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 256] {
        let a = Tensor::<f32>::new([n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = a.transpose().unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let (docs, table) = synth_corpus(&SynthSpec::default()).unwrap();
    let config = desk_config();
    let params = ModelParams::<f32>::init(&config, 0).unwrap();
    let net = Network::new(&config, &params, &table).unwrap();
    let windows: Vec<_> = docs.iter().flat_map(|d| training_windows(d, config.k).unwrap()).take(16).collect();
    let batch = batch_and_pad(&windows, &table, config.k, config.t);

    c.bench_function("boundary_probabilities/16", |b| b.iter(|| net.boundary_probabilities(black_box(&batch)).unwrap()));
    c.bench_function("segmentation_gradients/16", |b| {
        b.iter(|| net.segmentation_gradients(black_box(&batch), None).unwrap())
    });
    c.bench_function("infer_document", |b| b.iter(|| infer_with(&net, black_box(&docs[0])).unwrap()));
}

fn metric(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut draw = |n: usize| {
        let mut v: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.1))).collect();
        v[0] = 1;
        v
    };
    let (r, h) = (draw(10_000), draw(10_000));
    c.bench_function("pk_metric/10000", |b| b.iter(|| pk_metric(black_box(&r), black_box(&h), 5).unwrap()));
}

criterion_group!(benches, matmul, network, metric);
criterion_main!(benches);
