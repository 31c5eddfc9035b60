use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use weakmcn::synth::{generate_scene_pair, DatasetConfig};
use weakmcn::Tape;
use weakmcn_bench::wave;

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    // the first two encoder layers at 64×64, then a dilated decoder branch
    for &(cin, cout, size, stride, dilation) in &[(3, 8, 64, 2, 1), (8, 16, 32, 2, 1), (16, 8, 8, 1, 3)] {
        let x = wave(&[cin, size, size], 0.0);
        let w = wave(&[cout, cin, 3, 3], 1.0);
        let id = format!("{cin}x{size}x{size}->{cout} s{stride} d{dilation}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let wv = tape.param(w.clone());
                black_box(tape.conv2d(xv, wv, None, stride, dilation).unwrap());
            })
        });
        group.bench_function(BenchmarkId::new("forward+backward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.param(x.clone());
                let wv = tape.param(w.clone());
                let y = tape.conv2d(xv, wv, None, stride, dilation).unwrap();
                let s = tape.sum_all(y).unwrap();
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let a = wave(&[256, 144], 0.0);
    let bm = wave(&[144, 64], 2.0);
    c.bench_function("matmul 256x144x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(bm.clone());
            black_box(tape.matmul(av, bv).unwrap());
        })
    });
}

fn scenes(c: &mut Criterion) {
    let config = DatasetConfig::default();
    let mut i = 0usize;
    c.bench_function("scene generation 64x64", |b| {
        b.iter(|| {
            i += 1;
            black_box(generate_scene_pair(&config, i));
        })
    });
}

criterion_group!(benches, conv2d, matmul, scenes);
criterion_main!(benches);
