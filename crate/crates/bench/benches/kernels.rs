use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stopband_core::budget::{budget_loss, surrogate_cost, total_loss};
use stopband_core::models::{BuildOptions, ForwardMode};
use stopband_core::reparam::h;
use stopband_core::tensor::gemm_nn;
use stopband_core::{BudgetSpec, Graph, Model, Real, ReparamConfig, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm_nn");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &n in &[64usize, 256] {
        let a = random(&mut rng, &[n, n]);
        let b = random(&mut rng, &[n, n]);
        let mut out = vec![0.0; n * n];
        group.throughput(Throughput::Elements((2 * n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm_nn(n, n, n, a.data(), b.data(), black_box(&mut out)))
        });
    }
    group.finish();
}

fn conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[16, 32, 16, 16]);
    let k = random(&mut rng, &[64, 32, 3, 3]);
    c.bench_function("conv2d forward+backward 16x32x16x16 * 64x32x3x3", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let kv = g.param(k.clone());
            let y = g.conv2d(xv, kv, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(kv).unwrap()[0])
        })
    });
}

fn stopband_function(c: &mut Criterion) {
    let xs: Vec<Real> = (0..10_000).map(|i| (i as Real - 5000.0) * 1e-3).collect();
    let mut group = c.benchmark_group("h");
    group.throughput(Throughput::Elements(xs.len() as u64));
    group.bench_function("10k values, t=1, n=4", |bench| {
        bench.iter(|| xs.iter().map(|&x| h(black_box(x), 1.0, 4)).sum::<Real>())
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let model = Model::build(
        "conv4-small",
        10,
        &[3, 8, 8],
        BuildOptions {
            seed: 0,
            reparam: Some(ReparamConfig::new(4, 100.0).unwrap()),
        },
    )
    .unwrap();
    let spec = BudgetSpec::new(model.count_prunable() as Real, 0.9, 5.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = random(&mut rng, &[64, 3, 8, 8]);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let n = model.crispness().unwrap();
    c.bench_function("conv4-small reparam step, batch 64 of 3x8x8", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(images.clone());
            let fwd = model.forward(&mut g, x, ForwardMode::Train).unwrap();
            let task = g.softmax_cross_entropy(fwd.logits, &labels).unwrap();
            let cost = surrogate_cost(&mut g, &fwd.reparam_pairs(&model), n).unwrap();
            let b = budget_loss(&mut g, cost, &spec);
            let loss = total_loss(&mut g, task, b, spec.lambda()).unwrap();
            g.backward(loss).unwrap();
            black_box(g.value(loss).item())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, conv2d, stopband_function, train_step
}
criterion_main!(benches);
