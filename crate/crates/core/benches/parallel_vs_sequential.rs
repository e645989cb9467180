//! Compare the rayon data-parallel paths against the sequential fallback on
//! the three hot loops: batched channel statistics, bank mining, and
//! confusion accumulation across images.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ndarray::Array3;
use pinadapt::backend::{EncoderBackend, ToyBackend};
use pinadapt::mining::{mine_style_indexed, MiningConfig};
use pinadapt::rng::{rng_for, Stream};
use pinadapt::stats::channel_stats;
use pinadapt::types::{FeatureMap, Image, StatsEpsilon};
use pinadapt::{eval::ConfusionMatrix, par};
use rand::Rng;

fn toy_features(n: usize) -> (ToyBackend, Vec<FeatureMap>) {
    let backend = ToyBackend::new();
    let features = (0..n)
        .map(|i| {
            let mut rng = rng_for(0xbe, Stream::ToyData, i as u64);
            let img = Image::new(Array3::from_shape_fn((3, 64, 64), |_| {
                rng.random_range(0.0..1.0)
            }))
            .unwrap();
            backend.extract_low_features(&img).unwrap()
        })
        .collect();
    (backend, features)
}

fn bench_channel_stats(c: &mut Criterion) {
    let (_, features) = toy_features(256);
    let eps = StatsEpsilon::default();
    let mut group = c.benchmark_group("channel_stats_batch");
    group.bench_function(BenchmarkId::new("parallel", features.len()), |b| {
        b.iter(|| black_box(par::map_indexed(&features, |_, f| channel_stats(f, eps))))
    });
    group.bench_function(BenchmarkId::new("sequential", features.len()), |b| {
        b.iter(|| black_box(par::map_indexed_seq(&features, |_, f| channel_stats(f, eps))))
    });
    group.finish();
}

fn bench_mining(c: &mut Criterion) {
    let (backend, features) = toy_features(16);
    let target = backend.encode_text_raw("toy night").unwrap();
    let cfg = MiningConfig {
        iterations: 10,
        ..MiningConfig::toy_default(1)
    };
    let mine = |i: usize, f: &FeatureMap| {
        mine_style_indexed(f, &target, &cfg, &backend, i as u64).unwrap()
    };
    let mut group = c.benchmark_group("mine_bank");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("parallel", features.len()), |b| {
        b.iter(|| black_box(par::map_indexed(&features, mine)))
    });
    group.bench_function(BenchmarkId::new("sequential", features.len()), |b| {
        b.iter(|| black_box(par::map_indexed_seq(&features, mine)))
    });
    group.finish();
}

fn bench_confusion(c: &mut Criterion) {
    let mut rng = rng_for(0xc0, Stream::ToyData, 0);
    let images: Vec<(ndarray::Array2<u8>, ndarray::Array2<u8>)> = (0..64)
        .map(|_| {
            let pred = ndarray::Array2::from_shape_fn((64, 64), |_| rng.random_range(0..4u8));
            let label = ndarray::Array2::from_shape_fn((64, 64), |_| {
                if rng.random_bool(0.1) {
                    255u8
                } else {
                    rng.random_range(0..4u8)
                }
            });
            (pred, label)
        })
        .collect();
    let accumulate = |_: usize, (pred, label): &(ndarray::Array2<u8>, ndarray::Array2<u8>)| {
        let mut cm = ConfusionMatrix::new(4, 255).unwrap();
        cm.accumulate(pred, label).unwrap();
        cm
    };
    let merge = |mut a: ConfusionMatrix, b: ConfusionMatrix| {
        a.merge(&b);
        a
    };
    let mut group = c.benchmark_group("confusion_accumulate");
    group.bench_function(BenchmarkId::new("parallel", images.len()), |b| {
        b.iter(|| {
            black_box(par::map_reduce(
                &images,
                accumulate,
                || ConfusionMatrix::new(4, 255).unwrap(),
                merge,
            ))
        })
    });
    group.bench_function(BenchmarkId::new("sequential", images.len()), |b| {
        b.iter(|| {
            black_box(par::map_reduce_seq(
                &images,
                accumulate,
                || ConfusionMatrix::new(4, 255).unwrap(),
                merge,
            ))
        })
    });
    group.finish();
}

criterion_group!(benches, bench_channel_stats, bench_mining, bench_confusion);
criterion_main!(benches);
