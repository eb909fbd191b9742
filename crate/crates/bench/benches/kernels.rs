use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use daylight_core::nn::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // first and last layers of the image branch at 64 px
    for &(cin, cout, side) in &[(1, 16, 64), (64, 128, 8)] {
        let x = random(&[32, cin, side, side], &mut rng);
        let w = random(&[cout, cin, 3, 3], &mut rng);
        let b = random(&[cout], &mut rng);
        let id = format!("{cin}x{side}x{side}->{cout}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, w, b) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
                t.conv2d(x, w, b, 1, 1).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let x = t.leaf(x.clone().with_grad());
                let (w, b) = (t.leaf(w.clone().with_grad()), t.leaf(b.clone().with_grad()));
                let y = t.conv2d(x, w, b, 1, 1).unwrap();
                let s = t.sum(y);
                t.backward(s).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("fused_block_forward_backward", &id), &(), |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let x = t.leaf(x.clone().with_grad());
                let (w, b) = (t.leaf(w.clone().with_grad()), t.leaf(b.clone().with_grad()));
                let y = t.conv_pool_relu(x, w, b, 1, "block").unwrap();
                let s = t.sum(y);
                t.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv);
criterion_main!(benches);
