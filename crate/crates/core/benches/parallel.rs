use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reasonroute_core::features::{extract_features_batch, CostModel, EmbeddingDump, FeatureSchema, KMeansConfig};
use reasonroute_core::policy::{default_eta_grid, sweep_eta, LoggedPair, SweepInputs};
use reasonroute_core::router::{train, Reweight, TrainConfig};
use reasonroute_core::Execution;

fn modes() -> Vec<(&'static str, Execution)> {
    vec![
        ("sequential", Execution::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Execution::Parallel),
    ]
}

fn dumps(n: usize, cands: usize, dim: usize) -> Vec<EmbeddingDump> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    (0..n)
        .map(|i| EmbeddingDump {
            instance_id: format!("q{i}"),
            dim,
            context: Some(v(dim)),
            history: None,
            candidates: (0..cands).map(|_| v(dim)).collect(),
            prompt_tokens: 400,
        })
        .collect()
}

fn bench_features(c: &mut Criterion) {
    let data = dumps(64, 50, 16);
    let cost = CostModel::constant(300.0);
    let cfg = KMeansConfig::default();
    let mut g = c.benchmark_group("extract_features");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| extract_features_batch(exec, black_box(&data), &cost, &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 5_000;
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(100.0..600.0)).collect();
    let p: Vec<LoggedPair> = (0..n)
        .map(|_| LoggedPair {
            u_non: rng.random_range(0.0..1.0),
            u_think: rng.random_range(0.0..1.0),
            t_non: rng.random_range(30.0..80.0),
            t_think: rng.random_range(200.0..600.0),
        })
        .collect();
    let inputs = SweepInputs::new(&a, &d, &p).unwrap();
    let grid = default_eta_grid(&a, &d, 200);
    let mut g = c.benchmark_group("sweep_eta");
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| sweep_eta(exec, black_box(&inputs), &grid).unwrap())
        });
    }
    g.finish();
}

fn bench_train(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, p) = (1_200, 16);
    let x: Array2<f64> = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..n).map(|i| x[[i, 0]] - 0.5 * x[[i, 3]] * x[[i, 5]]).collect();
    let w = vec![1.0; n];
    let schema = FeatureSchema::new((0..p).map(|j| format!("f{j}")).collect());
    let cfg = TrainConfig {
        n_rounds: 20,
        reweight: Reweight::None,
        monotone_decreasing: vec!["f15".into()],
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("router_train");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train(exec, black_box(&x), &y, &w, &schema, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_features, bench_sweep, bench_train);
criterion_main!(benches);
