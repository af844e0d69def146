//! Sequential vs. rayon evaluation of the per-pair work: one engine step's
//! base gradients and CV columns, a large pair batch, and the property
//! suite's Monte Carlo loop.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cvvi::cv::CvSet;
use cvvi::engine;
use cvvi::par::Execution;
use cvvi::rng::{stream, Purpose};
use cvvi::{checks, synthetic, Gaussian};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn evaluate_pairs(c: &mut Criterion) {
    let ds = synthetic::australian_like(0);
    let g = Gaussian::new(synthetic::random_params(ds.dim(), 7));
    let set = CvSet::parse("S7").unwrap();
    let mut group = c.benchmark_group("evaluate_pairs_s7");
    for count in [10, 1000] {
        let pairs = engine::draw_pair_sequence(&mut stream(0, Purpose::Checks, 0), ds.len(), count, 10, ds.dim()).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, count), &pairs, |b, pairs| {
                b.iter(|| engine::evaluate_pairs(&g, black_box(pairs), &ds, &set, false, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn zero_mean_loop(c: &mut Criterion) {
    let ds = checks::blobs();
    let g = Gaussian::new(synthetic::random_params(ds.dim(), 1));
    let len = g.params().flat_len();
    let mut group = c.benchmark_group("cv_c4_moments_20k");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                checks::pair_moments(&ds, len, 20_000, 3, exec, |p| {
                    cvvi::cv::evaluate_cv(cvvi::CvId::C4, &g, p, &ds).map(|c| c.0).map_err(|e| e.to_string())
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

fn seeds(c: &mut Criterion) {
    let ds = checks::blobs();
    let cfg = cvvi::harness::ExperimentConfig { seeds: 4, iterations: 100, ..Default::default() };
    let set = CvSet::parse("S7").unwrap();
    let mut group = c.benchmark_group("four_runs_100_iters");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| cvvi::harness::run_seeds(&ds, &cfg, 0.1, &set, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, evaluate_pairs, zero_mean_loop, seeds);
criterion_main!(benches);
