use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use dpem::accountant::{Method, Scenario};
use dpem::experiment::{run_sweep, ModelSpec, SweepConfig};
use dpem::io::synth_mog;
use dpem::kmeans;
use dpem::mog::{self, Estimator, Init};
use dpem::par::Exec;

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn row_kernels(c: &mut Criterion) {
    let data = synth_mog(50_000, 8, 5, 3.0, 1).unwrap().data;
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let params = mog::initialize(&data, 5, &Init::KMeansPlusPlus, &mut rng).unwrap();
    let centers = kmeans::random_centers(5, 8, &mut rng);

    let mut g = c.benchmark_group("rows");
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::new("e_step", name), &exec, |b, &exec| {
            b.iter(|| mog::e_step_with(black_box(&data), &params, exec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("log_likelihood", name), &exec, |b, &exec| {
            b.iter(|| mog::log_likelihood_with(black_box(&data), &params, exec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("assign", name), &exec, |b, &exec| {
            b.iter(|| kmeans::assign(black_box(&data), &centers, exec))
        });
        g.bench_with_input(BenchmarkId::new("nicv", name), &exec, |b, &exec| {
            b.iter(|| kmeans::nicv_with(black_box(&data), &centers, exec).unwrap())
        });
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let data = synth_mog(5_000, 4, 3, 3.0, 3).unwrap().data;
    let cfg = SweepConfig {
        model: ModelSpec::Mog {
            k: 3,
            iters: 5,
            scenario: Scenario::Ggg,
            estimator: Estimator::Map,
        },
        eps_list: vec![0.5, 2.0],
        delta: 1e-4,
        delta_i: 1e-6,
        methods: vec![Method::Linear, Method::Zcdp],
        folds: 4,
        seeds: 1,
        master_seed: 4,
        lambda_max: 512,
    };
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::new("mog", name), &exec, |b, &exec| {
            b.iter(|| run_sweep(black_box(&data), &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, row_kernels, sweep);
criterion_main!(benches);
