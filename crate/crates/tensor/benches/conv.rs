use canvasinfill_tensor::kernels::{conv2d_forward, conv2d_input_grad, conv2d_weight_grad, ConvGeom, Exec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn buffer(len: usize) -> Vec<f64> {
    (0..len).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect()
}

fn conv_kernels(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3_batch8_64x64");
    let g = ConvGeom::new([8, 32, 64, 64], [32, 32, 3, 3], 1, 1);
    let x = buffer(g.n * g.x_len());
    let w = buffer(g.w_len());
    let gy = buffer(g.n * g.y_len());
    for exec in [Exec::Sequential, Exec::Parallel] {
        let label = format!("{exec:?}");
        group.bench_with_input(BenchmarkId::new("forward", &label), &exec, |b, &e| {
            b.iter(|| conv2d_forward(e, &g, &x, &w))
        });
        group.bench_with_input(BenchmarkId::new("input_grad", &label), &exec, |b, &e| {
            b.iter(|| conv2d_input_grad(e, &g, &gy, &w))
        });
        group.bench_with_input(BenchmarkId::new("weight_grad", &label), &exec, |b, &e| {
            b.iter(|| conv2d_weight_grad(e, &g, &x, &gy))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv_kernels
}
criterion_main!(benches);
