#![allow(dead_code)]

use dekrr_core::dataset::{normalize, partition, split_train_test, RawDataset};
use dekrr_core::features::sample_gaussian_features;
use dekrr_core::simulator::{setup_exchange, Exchange, LocalNode};
use dekrr_core::solver::GlobalParams;
use dekrr_core::{rng_for, Dataset, FeatureSpec, MappingKind, NodeState, PartitionMode, Penalties, Shard, Topology};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `y = cos(ω*ᵀx) + noise` on `[0,1]^dim`, normalized.
pub fn cosine_dataset(n: usize, dim: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = rng_for(seed, 7);
    let omega: Vec<f64> = (0..dim).map(|_| { let g: f64 = StandardNormal.sample(&mut rng); 3.0 * g }).collect();
    let x = Array2::from_shape_simple_fn((n, dim), || rng.random::<f64>());
    let y = Array1::from_iter(x.rows().into_iter().map(|r| {
        let e: f64 = StandardNormal.sample(&mut rng);
        r.iter().zip(&omega).map(|(a, b)| a * b).sum::<f64>().cos() + noise * e
    }));
    normalize(&RawDataset::new("cosine", x, y).unwrap())
}

/// Smooth nonlinear target with heteroscedastic structure across the input space.
pub fn smooth_dataset(n: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = rng_for(seed, 8);
    let x = Array2::from_shape_simple_fn((n, dim), || rng.random::<f64>());
    let y = Array1::from_iter(x.rows().into_iter().map(|r| {
        let e: f64 = StandardNormal.sample(&mut rng);
        let s: f64 = r.iter().enumerate().map(|(i, v)| ((i + 1) as f64 * v).sin()).sum();
        s + (4.0 * r[0] * r[dim - 1]).cos() + 0.05 * e
    }));
    normalize(&RawDataset::new("smooth", x, y).unwrap())
}

pub fn shards(ds: &Dataset, nodes: usize, mode: PartitionMode, seed: u64) -> Vec<Shard> {
    let p = partition(ds, nodes, mode, seed).unwrap();
    split_train_test(&p, ds, seed).unwrap()
}

pub fn params(lambda: f64, shards: &[Shard]) -> GlobalParams {
    GlobalParams {
        lambda,
        total: shards.iter().map(Shard::n_train).sum(),
        nodes: shards.len(),
    }
}

/// Independent plain features of `count` frequencies per node.
pub fn plain_specs(shards: &[Shard], count: usize, sigma: f64, kind: MappingKind, seed: u64) -> Vec<FeatureSpec> {
    let dim = shards[0].train_x.ncols();
    (0..shards.len())
        .map(|j| sample_gaussian_features(dim, count, sigma, seed * 1000 + j as u64, kind).unwrap())
        .collect()
}

pub struct Instance {
    pub topology: Topology,
    pub penalties: Penalties,
    pub params: GlobalParams,
    pub exchange: Exchange,
}

impl Instance {
    pub fn states(&self) -> Vec<NodeState> {
        self.exchange.states.clone()
    }
}

pub fn instance(
    topology: Topology,
    shards: Vec<Shard>,
    specs: Vec<FeatureSpec>,
    lambda: f64,
    c_nei: f64,
    self_ratio: f64,
    trace: bool,
) -> Instance {
    let params = params(lambda, &shards);
    let penalties = Penalties::uniform(&topology, params.total, c_nei, self_ratio).unwrap();
    let nodes = shards
        .into_iter()
        .zip(specs)
        .map(|(shard, spec)| LocalNode { shard, spec })
        .collect();
    let exchange = setup_exchange(&topology, nodes, &penalties, &params, trace).unwrap();
    Instance {
        topology,
        penalties,
        params,
        exchange,
    }
}

pub fn with_thetas(states: &[NodeState], thetas: &[Array1<f64>]) -> Vec<NodeState> {
    states
        .iter()
        .zip(thetas)
        .map(|(s, t)| {
            let mut s = s.clone();
            s.theta = t.clone();
            s
        })
        .collect()
}

pub fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Sets every node's `c̃_self` to `factor` times its descent bound and
/// refactors the local systems. Panics when a bound is unsatisfiable.
pub fn set_self_to_bound(states: &mut [NodeState], penalties: &mut Penalties, factor: f64) {
    for st in states.iter_mut() {
        let bound = dekrr_core::solver::descent_bound(st.id, &st.blocks, penalties).expect("satisfiable bound");
        penalties.set_tilde_self(st.id, factor * bound);
        st.aux.set_tilde_self(penalties.tilde_self(st.id)).unwrap();
    }
}

/// Stacks every node's training or test rows.
pub fn pooled(shards: &[Shard], train: bool) -> (Array2<f64>, Array1<f64>) {
    use ndarray::{concatenate, Axis};
    let xs: Vec<_> = shards.iter().map(|s| if train { s.train_x.view() } else { s.test_x.view() }).collect();
    let ys: Vec<_> = shards.iter().map(|s| if train { s.train_y.view() } else { s.test_y.view() }).collect();
    (concatenate(Axis(0), &xs).unwrap(), concatenate(Axis(0), &ys).unwrap())
}
