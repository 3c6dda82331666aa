//! Superstep throughput with node work fanned out over rayon versus run in
//! node order on one thread.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use skewsim::nn::Arch;
use skewsim::sim::{Cluster, DatasetKind, ExperimentConfig, NormChoice};
use skewsim::sync::Algo;
use skewsim::Exec;

fn config(algo: Algo, exec: Exec) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetKind::Glyphs,
        synth_samples: 4000,
        synth_noise: 0.3,
        arch: Arch::SmallConv,
        norm: NormChoice::Group,
        k: 8,
        skew_fraction: 0.5,
        algo,
        eta0: 0.003,
        epochs: 100,
        exec,
        ..ExperimentConfig::default()
    }
}

fn superstep(c: &mut Criterion) {
    let ds = Arc::new(config(Algo::Bsp, Exec::Sequential).load_dataset().unwrap());
    let mut group = c.benchmark_group("superstep");
    group.sample_size(20);
    for algo in [Algo::Bsp, Algo::Gaia, Algo::Dgc] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let mut cluster = Cluster::<f32>::new(&config(algo, exec), ds.clone()).unwrap();
            group.bench_function(BenchmarkId::new(algo.name(), format!("{exec:?}")), |b| {
                b.iter(|| cluster.superstep().unwrap());
            });
        }
    }
    group.finish();
}

criterion_group!(benches, superstep);
criterion_main!(benches);
