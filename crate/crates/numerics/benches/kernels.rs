use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rfssl_numerics::kernels::{conv1d_backward, conv1d_forward, matmul_nt, Conv1dGeom};
use rfssl_numerics::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn signal(n: usize, salt: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (((i * 2654435761 + salt) % 1000) as f32) / 500.0 - 1.0)
        .collect()
}

fn bench_conv(c: &mut Criterion) {
    // Stem layer of the small encoder over a batch of IQ frames.
    let g = Conv1dGeom {
        batch: 64,
        c_in: 8,
        len_in: 1024,
        c_out: 32,
        kernel: 8,
        stride: 4,
        padding: 2,
    };
    let lout = g.len_out().unwrap();
    let x = signal(g.batch * g.c_in * g.len_in, 1);
    let w = signal(g.c_out * g.c_in * g.kernel, 2);
    let dy = signal(g.batch * g.c_out * lout, 3);

    let mut group = c.benchmark_group("conv1d");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("forward", name), &exec, |b, &e| {
            b.iter(|| black_box(conv1d_forward(e, &g, &x, &w, None)))
        });
        group.bench_with_input(BenchmarkId::new("backward", name), &exec, |b, &e| {
            b.iter(|| black_box(conv1d_backward(e, &g, &x, &w, &dy, true)))
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let (m, k, n) = (256, 256, 512);
    let a = signal(m * k, 4);
    let b = signal(n * k, 5);
    let mut out = vec![0.0f32; m * n];
    let mut group = c.benchmark_group("matmul_nt");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |bch, &e| {
            bch.iter(|| {
                matmul_nt(e, &a, &b, &mut out, m, k, n);
                black_box(out[0])
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_matmul);
criterion_main!(benches);
