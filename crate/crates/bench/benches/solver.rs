use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dekrr_core::dataset::{normalize, partition, split_train_test};
use dekrr_core::features::{sample_gaussian_features, score_features};
use dekrr_core::graph::ring_lattice;
use dekrr_core::simulator::{run, setup_exchange, LocalNode};
use dekrr_core::solver::{local_update, GlobalParams};
use dekrr_core::{CandidatePool, MappingKind, PartitionMode, Penalties, RawDataset, RunOptions, Shard};
use ndarray::{Array1, Array2, ArrayView1};

fn dataset(n: usize, dim: usize) -> RawDataset {
    let x = Array2::from_shape_fn((n, dim), |(i, j)| ((i * 31 + j * 17) % 97) as f64 / 97.0);
    let y = Array1::from_iter(x.rows().into_iter().map(|r| r.iter().map(|v| (3.0 * v).sin()).sum::<f64>()));
    RawDataset::new("bench", x, y).unwrap()
}

fn shards(n: usize, nodes: usize) -> Vec<Shard> {
    let ds = normalize(&dataset(n, 8));
    let p = partition(&ds, nodes, PartitionMode::Balanced, 0).unwrap();
    split_train_test(&p, &ds, 0).unwrap()
}

fn exchange(nodes: usize, per_node: usize, features: usize) -> (Vec<dekrr_core::NodeState>, Penalties, GlobalParams) {
    let sh = shards(nodes * per_node, nodes);
    let topology = ring_lattice(nodes, 4).unwrap();
    let total: usize = sh.iter().map(Shard::n_train).sum();
    let params = GlobalParams { lambda: 1e-4, total, nodes };
    let penalties = Penalties::uniform(&topology, total, 0.5 * total as f64, 5.0).unwrap();
    let locals = sh
        .into_iter()
        .enumerate()
        .map(|(j, shard)| LocalNode {
            spec: sample_gaussian_features(8, features, 1.0, j as u64, MappingKind::CosWithPhase).unwrap(),
            shard,
        })
        .collect();
    let ex = setup_exchange(&topology, locals, &penalties, &params, false).unwrap();
    (ex.states, penalties, params)
}

fn bench_feature_matrix(c: &mut Criterion) {
    let x = normalize(&dataset(1000, 8)).features;
    let mut group = c.benchmark_group("feature_matrix");
    for d in [50, 200] {
        let spec = sample_gaussian_features(8, d, 1.0, 1, MappingKind::CosWithPhase).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(d), &spec, |b, spec| b.iter(|| spec.matrix(black_box(x.view())).unwrap()));
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let ds = normalize(&dataset(1000, 8));
    c.bench_function("score_1400_candidates", |b| {
        b.iter_batched(
            || CandidatePool::sample(8, 1400, 1.0, 2, MappingKind::CosWithPhase).unwrap(),
            |pool| score_features(pool, ds.features.view(), ds.targets.view()).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

fn bench_local_update(c: &mut Criterion) {
    let mut group = c.benchmark_group("local_update");
    for d in [20, 100] {
        let (states, _, _) = exchange(10, 100, d);
        let st = &states[0];
        let nbs: Vec<Array1<f64>> = st.blocks.neighbors.iter().map(|_| Array1::ones(d)).collect();
        let views: Vec<ArrayView1<f64>> = nbs.iter().map(|v| v.view()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| local_update(&st.aux, black_box(st.theta.view()), &views).unwrap())
        });
    }
    group.finish();
}

fn bench_rounds(c: &mut Criterion) {
    let (states, penalties, params) = exchange(10, 200, 50);
    let topology = ring_lattice(10, 4).unwrap();
    let mut group = c.benchmark_group("run_100_rounds");
    for parallel in [false, true] {
        let opts = RunOptions {
            tolerance: 0.0,
            max_rounds: 100,
            parallel,
            ..RunOptions::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(if parallel { "parallel" } else { "serial" }), &opts, |b, opts| {
            b.iter(|| run(states.clone(), &topology, penalties.clone(), &params, opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_feature_matrix, bench_scoring, bench_local_update, bench_rounds);
criterion_main!(benches);
