use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hrvq::exec;
use hrvq::tensor::kernels::{conv2d_forward, conv2d_transpose_forward};
use hrvq::tensor::Tensor;

fn input(shape: [usize; 4]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0)
}

fn conv(c: &mut Criterion) {
    let x = input([32, 32, 14, 14]);
    let w = input([32, 32, 3, 3]);
    let up = input([32, 32, 4, 4]);
    let mut group = c.benchmark_group("conv");
    group.sample_size(20);
    for parallel in [false, true] {
        let mode = if parallel { "parallel" } else { "sequential" };
        exec::set_parallel(parallel);
        group.bench_with_input(BenchmarkId::new("conv3x3", mode), &x, |b, x| {
            b.iter(|| conv2d_forward(x, &w, 1, 1).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("transpose4x4_s2", mode), &x, |b, x| {
            b.iter(|| conv2d_transpose_forward(x, &up, 2, 1).unwrap())
        });
    }
    exec::set_parallel(true);
    group.finish();
}

criterion_group!(benches, conv);
criterion_main!(benches);
