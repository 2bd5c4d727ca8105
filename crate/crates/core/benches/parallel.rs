//! Parallel vs sequential execution of the hot paths.
//!
//! With the default `parallel` feature each workload runs on rayon's global
//! pool and on a one-thread pool. Build with `--no-default-features` to time
//! the plain sequential loops instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mocae::model::{Mocae, ModelConfig};
use mocae::nn::{Ctx, Mode};
use mocae::retrieval::{Index, IndexEntry, QueryOptions};
use mocae::train::{objective, LossWeights};
use mocae::{Graph, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn variants() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    if cfg!(feature = "parallel") {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        vec![("rayon", None), ("one_thread", Some(one))]
    } else {
        vec![("sequential", None)]
    }
}

fn run<R>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn separable_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[16, 16, 64, 64], &mut rng);
    let dw = random(&[16, 1, 3, 3], &mut rng);
    let pw = random(&[32, 16, 1, 1], &mut rng);
    let mut group = c.benchmark_group("separable_conv_fwd_bwd");
    for (name, pool) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(&pool, || {
                    let mut g = Graph::new();
                    let xv = g.leaf(x.clone().with_requires_grad(true));
                    let dv = g.leaf(dw.clone().with_requires_grad(true));
                    let pv = g.leaf(pw.clone().with_requires_grad(true));
                    let h = g.depthwise_conv2d(xv, dv, 1, 1).unwrap();
                    let y = g.conv2d(h, pv, None, 1, 0).unwrap();
                    let loss = g.mean(y);
                    g.backward(loss).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Mocae::<f32>::build(&ModelConfig::default()).unwrap();
    let x = random(&[32, 4, 64, 64], &mut rng);
    let labels: Vec<f32> = (0..32).map(|i| (i % 2) as f32).collect();
    let mut group = c.benchmark_group("train_step_b32_64px");
    group.sample_size(10);
    for (name, pool) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(&pool, || {
                    let mut ctx = Ctx::new(model.params(), Mode::Train, 0).with_grad();
                    let xv = ctx.input(x.clone());
                    let (_, _, lt) =
                        objective(&model, &mut ctx, xv, &labels, LossWeights::default()).unwrap();
                    ctx.graph.backward(lt).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn knn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 64;
    let mut index = Index::new(dim).unwrap();
    for i in 0..20_000 {
        index
            .push(IndexEntry {
                descriptor: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                probability: rng.random(),
                tumour_flag: i % 3 == 0,
                case_id: format!("case{:04}", i / 100),
                z: i % 100,
            })
            .unwrap();
    }
    let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let opts = QueryOptions::default();
    let mut group = c.benchmark_group("knn_20k_d64");
    for (name, pool) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(&pool, || index.search(&q, 0.5, None, &opts).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, separable_conv, train_step, knn);
criterion_main!(benches);
