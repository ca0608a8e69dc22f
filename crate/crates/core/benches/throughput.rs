//! Batch throughput on the rayon pool against a single worker.
//!
//! Build with `--no-default-features` to measure the sequential fallback
//! instead of a one-thread pool.

use std::path::PathBuf;

use appmul::mullib::MultiplierLibrary;
use appmul::netsim::{Assignment, Simulator};
use appmul::perturb::{self, HessianMode};
use appmul::{data, modelfile, par, pipeline};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    if !par::is_parallel() {
        return vec![("sequential", single)];
    }
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("one-thread", single), ("parallel", all)]
}

fn bench(c: &mut Criterion) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let (train, _) = data::load_mnist_dir(root.join("data/mnist")).unwrap();
    let float = modelfile::read(root.join("models/lenet-small.amq")).unwrap();
    let model = pipeline::prepare(&float, &train.head(256), &[4; 4]).unwrap();
    let library = MultiplierLibrary::generate(&[4], 8, 0, 0.2).unwrap();
    let approx = Assignment::uniform(&model, "prune_4x4");
    let batch = train.head(256);
    let small = train.head(32);

    let mut g = c.benchmark_group("throughput");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_with_input(BenchmarkId::new("lut_forward_256", name), &pool, |b, pool| {
            let sim = Simulator::quantized(&model, &approx, &library).unwrap();
            b.iter(|| pool.install(|| sim.forward(&batch, false).unwrap().loss))
        });
        g.bench_with_input(BenchmarkId::new("rank_one_estimate_32", name), &pool, |b, pool| {
            let sim = Simulator::quantized(&model, &Assignment::all_exact(&model), &library).unwrap();
            b.iter(|| pool.install(|| perturb::estimate_sensitivities(&sim, &small, HessianMode::RankOne, 0).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
