//! Typed experiment settings and the per-seed pipeline:
//! partition, split, allocate, select features, exchange, run, evaluate.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::{partition, split_train_test, Dataset, PartitionMode, Shard, TableFormat};
use crate::error::{Error, Result};
use crate::eval::{run_baseline, BaselineKind, BaselineOutcome, MethodSettings};
use crate::features::MappingKind;
use crate::graph::{load_edge_list, ring_lattice, Topology};
use crate::simulator::{allocate_features, Allocation, RoundLog, Termination};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologySource {
    Ring { degree: usize },
    EdgeList(PathBuf),
}

impl TopologySource {
    pub fn build(&self, nodes: usize) -> Result<Topology> {
        match self {
            TopologySource::Ring { degree } => ring_lattice(nodes, *degree),
            TopologySource::EdgeList(path) => {
                let t = load_edge_list(path, Some(nodes))?;
                Ok(t)
            }
        }
    }
}

/// A penalty coefficient, either absolute or as a multiple of the total
/// training-set size `N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub value: f64,
    pub per_sample: bool,
}

impl Coefficient {
    pub fn resolve(&self, total: usize) -> f64 {
        if self.per_sample {
            self.value * total as f64
        } else {
            self.value
        }
    }
}

impl std::fmt::Display for Coefficient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.per_sample {
            write!(f, "{}N", self.value)
        } else {
            write!(f, "{}", self.value)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBudget {
    /// Mean features per node `D̄`, split by the allocation strategy.
    Mean(usize),
    /// Explicit `D_j` for every node.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub format: TableFormat,
    pub nodes: usize,
    pub topology: TopologySource,
    pub partition: PartitionMode,
    pub lambda: f64,
    pub sigma: f64,
    pub c_nei: Coefficient,
    pub c_self_mult: f64,
    pub mapping: MappingKind,
    pub features: FeatureBudget,
    pub allocation: Allocation,
    /// Candidates sampled per selected feature, `D_0/D_j`.
    pub d0_ratio: usize,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub max_rounds: usize,
    pub methods: Vec<BaselineKind>,
    pub probe_points: usize,
    pub output: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for every optional field around the required ones.
    pub fn with_defaults(dataset: PathBuf, format: TableFormat, nodes: usize, lambda: f64, sigma: f64, dbar: usize) -> Self {
        ExperimentConfig {
            dataset,
            format,
            nodes,
            topology: TopologySource::Ring { degree: 4 },
            partition: PartitionMode::Balanced,
            lambda,
            sigma,
            c_nei: Coefficient {
                value: 0.5,
                per_sample: true,
            },
            c_self_mult: 5.0,
            mapping: MappingKind::CosWithPhase,
            features: FeatureBudget::Mean(dbar),
            allocation: Allocation::Equal,
            d0_ratio: 20,
            seeds: vec![0],
            tolerance: 1e-6,
            max_rounds: 2000,
            methods: BaselineKind::ALL.to_vec(),
            probe_points: 200,
            output: PathBuf::from("out"),
        }
    }

    /// Checks value ranges. File existence is left to the caller.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.nodes == 0 {
            return bad("nodes must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        match &self.features {
            FeatureBudget::Mean(0) => return bad("dbar must be at least 1".into()),
            FeatureBudget::Explicit(d) if d.len() != self.nodes || d.contains(&0) => {
                return bad(format!("explicit feature counts need {} positive entries", self.nodes))
            }
            _ => {}
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("sigma", self.sigma),
            ("c_nei", self.c_nei.value),
            ("c_self_mult", self.c_self_mult),
            ("tolerance", self.tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.d0_ratio == 0 || self.max_rounds == 0 || self.probe_points == 0 {
            return bad("d0_ratio, max_rounds and probe_points must be at least 1".into());
        }
        Ok(())
    }

    /// Mean feature count per node.
    pub fn dbar(&self) -> usize {
        match &self.features {
            FeatureBudget::Mean(d) => *d,
            FeatureBudget::Explicit(d) => {
                ((d.iter().sum::<usize>() as f64) / d.len().max(1) as f64).round() as usize
            }
        }
    }
}

/// One `(method, D̄, seed)` run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodResult {
    pub dataset: String,
    pub method: BaselineKind,
    pub dbar: usize,
    pub seed: u64,
    pub rse: f64,
    /// Coefficient scalars sent over the whole run.
    pub comm_scalars: usize,
    pub comm_per_round: usize,
    pub rounds: usize,
    pub termination: Termination,
    pub comparability_hash: String,
    pub log: Vec<RoundLog>,
}

/// Partition and split for one seed.
pub fn prepare_shards(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Shard>> {
    let p = partition(ds, cfg.nodes, cfg.partition, seed)?;
    split_train_test(&p, ds, seed)
}

pub fn feature_counts(cfg: &ExperimentConfig, shards: &[Shard]) -> Result<Vec<usize>> {
    match &cfg.features {
        FeatureBudget::Mean(d) => {
            let sizes: Vec<usize> = shards.iter().map(Shard::n_train).collect();
            allocate_features(&sizes, *d, cfg.allocation)
        }
        FeatureBudget::Explicit(d) => Ok(d.clone()),
    }
}

pub fn method_settings(cfg: &ExperimentConfig, shards: &[Shard], seed: u64) -> Result<MethodSettings> {
    let total: usize = shards.iter().map(Shard::n_train).sum();
    Ok(MethodSettings {
        lambda: cfg.lambda,
        sigma: cfg.sigma,
        c_nei: cfg.c_nei.resolve(total),
        c_self_ratio: cfg.c_self_mult,
        mapping: cfg.mapping,
        feature_counts: feature_counts(cfg, shards)?,
        candidate_ratio: cfg.d0_ratio,
        seed,
        tolerance: cfg.tolerance,
        max_rounds: cfg.max_rounds,
        probe_points: cfg.probe_points,
    })
}

/// Runs every configured method for one seed on shared shards.
pub fn run_seed(ds: &Dataset, topology: &Topology, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MethodResult>> {
    let shards = prepare_shards(ds, cfg, seed)?;
    let settings = method_settings(cfg, &shards, seed)?;
    cfg.methods
        .iter()
        .map(|&kind| {
            let out = run_baseline(kind, &settings, topology, &shards)?;
            Ok(to_result(&ds.name, cfg.dbar(), seed, out))
        })
        .collect()
}

fn to_result(dataset: &str, dbar: usize, seed: u64, out: BaselineOutcome) -> MethodResult {
    MethodResult {
        dataset: dataset.to_string(),
        method: out.kind,
        dbar,
        seed,
        rse: out.test_rse,
        comm_scalars: out.comm.total,
        comm_per_round: out.comm.per_round,
        rounds: out.result.iterations(),
        termination: out.result.termination,
        comparability_hash: out.comparability_hash,
        log: out.result.rounds,
    }
}
