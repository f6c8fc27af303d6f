//! Decentralized kernel ridge regression with data-dependent random features.
//!
//! Every node fits a random-feature ridge model on its own shard, chosen from
//! its own data, and neighbours are pulled together by penalizing differences
//! between their *decision functions* on each other's data rather than
//! between their coefficient vectors. Each node's subproblem is solved in
//! closed form; the network runs synchronous (Jacobi) rounds.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod linalg;
pub mod snapshot;
pub mod simulator;
pub mod solver;

pub use dataset::{Dataset, Partition, PartitionMode, RawDataset, Shard, TableFormat};
pub use error::{Error, Result};
pub use eval::{BaselineKind, Predictor};
pub use experiment::{ExperimentConfig, MethodResult};
pub use features::{CandidatePool, FeatureSpec, MappingKind};
pub use graph::Topology;
pub use simulator::{RoundLog, RunOptions, Termination, TrainResult};
pub use solver::{AuxMatrices, NodeState, Penalties};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` under `seed`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
