use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dcnalign::dcn::{decomposed_deform_conv, deform_conv, kernel_taps, kernel_to_pointwise};
use dcnalign::gradients::dcn_backward;
use dcnalign::sampling::{warp, BaseOffset};
use dcnalign::FeatureMap;
use dcnalign_bench::layer;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for &(ch, s, g) in &[(8, 16, 1), (16, 32, 4)] {
        let (x, k, off) = layer(ch, s, 3, g, 1);
        let pw = kernel_to_pointwise(&k, g).unwrap();
        let taps = kernel_taps(3);
        let id = format!("c{ch}_s{s}_g{g}");
        group.bench_with_input(BenchmarkId::new("deform_conv", &id), &(), |b, _| {
            b.iter(|| deform_conv(black_box(&x), &off, &k, g).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("decomposed", &id), &(), |b, _| {
            b.iter(|| decomposed_deform_conv(black_box(&x), &off, &taps, &pw, g).unwrap())
        });
    }
    group.finish();
}

fn warping(c: &mut Criterion) {
    let (x, _, off) = layer(16, 64, 1, 1, 2);
    let disp = off.displacement(0, 0).unwrap();
    c.bench_function("warp_c16_s64", |b| {
        b.iter(|| warp(black_box(&x), &disp, BaseOffset::ZERO).unwrap())
    });
}

fn backward(c: &mut Criterion) {
    let (x, k, off) = layer(8, 16, 3, 2, 3);
    let pw = kernel_to_pointwise(&k, 2).unwrap();
    let taps = kernel_taps(3);
    let upstream = FeatureMap::new(dcnalign::Tensor::new(&[8, 16, 16], 1.0).unwrap()).unwrap();
    c.bench_function("dcn_backward_c8_s16_g2", |b| {
        b.iter(|| dcn_backward(black_box(&upstream), &x, &off, None, &taps, &pw, 2).unwrap())
    });
}

criterion_group!(benches, forward, warping, backward);
criterion_main!(benches);
