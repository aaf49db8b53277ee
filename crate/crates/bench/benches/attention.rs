//! Softmax against linear attention as the token count grows.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dinomaly_core::model::attention::{linear_attention, softmax_attention, AttentionParams};
use dinomaly_core::TokenGrid;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const DIM: usize = 64;

fn grid(side: usize, rng: &mut ChaCha8Rng) -> TokenGrid<f32> {
    let data = Array3::from_shape_fn((1, side * side, DIM), |_| StandardNormal.sample(rng));
    TokenGrid::new(data, side, side).unwrap()
}

fn mixing(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = AttentionParams::<f32>::new(&mut rng, DIM, 1, 0.1).unwrap();
    let mut group = c.benchmark_group("attention");
    for side in [8, 16, 28] {
        let x = grid(side, &mut rng);
        let n = side * side;
        group.bench_with_input(BenchmarkId::new("softmax", n), &x, |b, x| {
            b.iter(|| softmax_attention(black_box(x), &params).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("linear", n), &x, |b, x| {
            b.iter(|| linear_attention(black_box(x), &params, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, mixing);
criterion_main!(benches);
