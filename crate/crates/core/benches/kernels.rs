//! Sequential against rayon-parallel kernels. Without the `parallel` feature
//! only the sequential path is measured.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use emodarts_core::kernels::{conv2d_backward_weight_with, conv2d_forward_with, linear_forward_with, ConvGeom, Exec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn strategies() -> Vec<(&'static str, Exec)> {
    vec![
        ("sequential", Exec::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Exec::Parallel),
    ]
}

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn geom(batch: usize, channels: usize, side: usize) -> ConvGeom {
    ConvGeom {
        batch,
        in_channels: channels,
        height: side,
        width: side,
        out_channels: channels,
        kernel: (3, 3),
        stride: (1, 1),
        padding: (1, 1),
        dilation: (1, 1),
        groups: 1,
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d_3x3");
    for (batch, channels, side) in [(8, 8, 32), (16, 16, 64)] {
        let g = geom(batch, channels, side);
        let x = random(batch * channels * side * side, &mut rng);
        let w = random(g.weight_len(), &mut rng);
        let (oh, ow) = g.out_hw();
        let gout = random(batch * channels * oh * ow, &mut rng);
        let label = format!("{batch}x{channels}x{side}");
        group.throughput(Throughput::Elements((batch * channels * oh * ow) as u64));
        for (name, exec) in strategies() {
            group.bench_with_input(BenchmarkId::new(format!("forward/{name}"), &label), &g, |b, g| {
                b.iter(|| conv2d_forward_with(exec, black_box(&x), black_box(&w), g))
            });
            group.bench_with_input(BenchmarkId::new(format!("backward_weight/{name}"), &label), &g, |b, g| {
                b.iter(|| conv2d_backward_weight_with(exec, black_box(&gout), black_box(&x), g))
            });
        }
    }
    group.finish();
}

fn linear(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("linear");
    for (rows, k, out) in [(64, 256, 64), (512, 512, 256)] {
        let x = random(rows * k, &mut rng);
        let w = random(out * k, &mut rng);
        let bias = random(out, &mut rng);
        let label = format!("{rows}x{k}x{out}");
        group.throughput(Throughput::Elements((rows * out) as u64));
        for (name, exec) in strategies() {
            group.bench_function(BenchmarkId::new(name, &label), |b| {
                b.iter(|| linear_forward_with(exec, black_box(&x), black_box(&w), Some(&bias), rows, k, out))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, conv, linear);
criterion_main!(benches);
