//! Metrics, centralized reference predictors, the three method runners and
//! hyperparameter cross-validation.

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Shard;
use crate::error::{Error, Result};
use crate::features::{gaussian_kernel, sample_gaussian_features, select_data_dependent, FeatureSpec, MappingKind};
use crate::graph::Topology;
use crate::linalg::Cholesky;
use crate::rng_for;
use crate::simulator::{comm_cost, run, setup_exchange, CommCost, LocalNode, RunOptions, TrainResult};
use crate::solver::{GlobalParams, NodeState, Penalties};

/// Relative square error `Σ(fᵢ−yᵢ)² / Σ(yᵢ−ȳ)²`.
pub fn rse(predictions: ArrayView1<f64>, targets: ArrayView1<f64>) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            got: predictions.len(),
        });
    }
    if targets.len() < 2 {
        return Err(Error::invalid("RSE needs at least two targets"));
    }
    let mean = targets.mean().expect("non-empty");
    let denom: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if denom == 0.0 {
        return Err(Error::invalid("RSE undefined for constant targets"));
    }
    let num: f64 = predictions.iter().zip(targets).map(|(f, y)| (f - y).powi(2)).sum();
    Ok(num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    CentralizedKrr,
    CentralizedRff,
    NodeLocal,
}

#[derive(Debug, Clone)]
pub enum Predictor {
    /// `f(x) = Σᵢ αᵢ k(x, xᵢ)`.
    Kernel {
        support: Array2<f64>,
        alpha: Array1<f64>,
        sigma: f64,
    },
    /// `f(x) = θᵀz(x)`.
    Features {
        kind: PredictorKind,
        spec: FeatureSpec,
        theta: Array1<f64>,
    },
}

impl Predictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            Predictor::Kernel { .. } => PredictorKind::CentralizedKrr,
            Predictor::Features { kind, .. } => *kind,
        }
    }

    pub fn node_local(state: &NodeState) -> Self {
        Predictor::Features {
            kind: PredictorKind::NodeLocal,
            spec: state.spec.clone(),
            theta: state.theta.clone(),
        }
    }

    /// Predictions for the rows of `x`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        match self {
            Predictor::Kernel { support, alpha, sigma } => {
                if x.ncols() != support.ncols() {
                    return Err(Error::DimensionMismatch {
                        expected: support.ncols(),
                        got: x.ncols(),
                    });
                }
                Ok(x.rows()
                    .into_iter()
                    .map(|row| {
                        support
                            .rows()
                            .into_iter()
                            .zip(alpha)
                            .map(|(s, a)| a * gaussian_kernel(row, s, *sigma))
                            .sum()
                    })
                    .collect())
            }
            Predictor::Features { spec, theta, .. } => Ok(spec.matrix(x)?.t().dot(theta)),
        }
    }
}

/// Largest training set the dense kernel solve accepts.
pub const KRR_MAX_POINTS: usize = 10_000;

pub fn kernel_matrix(x: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let n = x.nrows();
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let v = gaussian_kernel(x.row(i), x.row(j), sigma);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// Exact kernel ridge regression: `α = (K + λN·I)⁻¹ Y`.
pub fn centralized_krr(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64, sigma: f64) -> Result<Predictor> {
    let n = x.nrows();
    if n > KRR_MAX_POINTS {
        return Err(Error::invalid(format!(
            "{n} points exceed the dense kernel solve limit of {KRR_MAX_POINTS}; subsample first"
        )));
    }
    if n == 0 || n != y.len() {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    let mut k = kernel_matrix(x, sigma);
    for i in 0..n {
        k[[i, i]] += lambda * n as f64;
    }
    let ch = Cholesky::factor(k.view()).map_err(|pivot| Error::NotPositiveDefinite { node: 0, pivot })?;
    Ok(Predictor::Kernel {
        support: x.to_owned(),
        alpha: ch.solve(y),
        sigma,
    })
}

/// Ridge regression on fixed random features:
/// minimizes `(1/N)‖θᵀZ − Y‖² + λ‖θ‖²`, i.e. `θ = (ZZᵀ + λN·I)⁻¹ZY`.
pub fn centralized_rff(x: ArrayView2<f64>, y: ArrayView1<f64>, spec: &FeatureSpec, lambda: f64) -> Result<Predictor> {
    let z = spec.matrix(x)?;
    let n = x.nrows() as f64;
    let mut a = z.dot(&z.t());
    for i in 0..a.nrows() {
        a[[i, i]] += lambda * n;
    }
    let ch = Cholesky::factor(a.view()).map_err(|pivot| Error::NotPositiveDefinite { node: 0, pivot })?;
    Ok(Predictor::Features {
        kind: PredictorKind::CentralizedRff,
        spec: spec.clone(),
        theta: ch.solve(z.dot(&y).view()),
    })
}

/// Maximum over edges of the mean absolute difference between neighbouring
/// decision functions on the probe points. Zero without edges.
pub fn consensus_disagreement(states: &[NodeState], topology: &Topology, probe: ArrayView2<f64>) -> Result<f64> {
    if probe.nrows() == 0 {
        return Err(Error::Empty("probe set".into()));
    }
    let preds: Vec<Array1<f64>> = states.iter().map(|s| s.predict(probe)).collect::<Result<_>>()?;
    let m = probe.nrows() as f64;
    Ok(topology
        .edges()
        .iter()
        .map(|&(j, p)| preds[j].iter().zip(&preds[p]).map(|(a, b)| (a - b).abs()).sum::<f64>() / m)
        .fold(0.0, f64::max))
}

/// Seeded probe set drawn without replacement from the union of test shards.
pub fn probe_set(shards: &[Shard], size: usize, seed: u64) -> Array2<f64> {
    let views: Vec<_> = shards.iter().map(|s| s.test_x.view()).collect();
    let all = concatenate(Axis(0), &views).expect("shards share a dimension");
    let mut idx: Vec<usize> = (0..all.nrows()).collect();
    idx.shuffle(&mut rng_for(seed, 0x5052_4f42));
    idx.truncate(size.min(all.nrows()).max(1));
    all.select(Axis(0), &idx)
}

/// Test RSE over the union of all nodes' test halves, each node predicting
/// its own test points.
pub fn test_rse(states: &[NodeState]) -> Result<f64> {
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for st in states {
        preds.extend(st.predict(st.shard.test_x.view())?);
        targets.extend(st.shard.test_y.iter().copied());
    }
    rse(Array1::from(preds).view(), Array1::from(targets).view())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Plain random features shared by every node.
    DklaRff,
    /// Features selected on the largest node and broadcast to all.
    DklaDdrf,
    /// Every node selects its own features from its own data.
    DekrrDdrf,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::DekrrDdrf, BaselineKind::DklaRff, BaselineKind::DklaDdrf];

    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::DklaRff => "dkla_rff",
            BaselineKind::DklaDdrf => "dkla_ddrf",
            BaselineKind::DekrrDdrf => "dekrr_ddrf",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a method run needs besides shards and topology.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSettings {
    pub lambda: f64,
    pub sigma: f64,
    /// Absolute `c_nei`, identical on every node.
    pub c_nei: f64,
    pub c_self_ratio: f64,
    pub mapping: MappingKind,
    /// Per-node feature counts. Shared-feature methods use their rounded mean.
    pub feature_counts: Vec<usize>,
    /// Candidates sampled per selected feature.
    pub candidate_ratio: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rounds: usize,
    pub probe_points: usize,
}

/// Output of one method run.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub kind: BaselineKind,
    pub result: TrainResult,
    pub test_rse: f64,
    pub comm: CommCost,
    pub feature_dims: Vec<usize>,
    /// Hash of the inputs shared by every method (shards, topology, λ, σ,
    /// seeds); equal hashes certify a paired comparison.
    pub comparability_hash: String,
    pub final_disagreement: f64,
}

pub fn comparability_hash(settings: &MethodSettings, topology: &Topology, shards: &[Shard]) -> String {
    let mut h = Sha256::new();
    let shared = serde_json::json!({
        "lambda": settings.lambda,
        "sigma": settings.sigma,
        "c_nei": settings.c_nei,
        "c_self_ratio": settings.c_self_ratio,
        "mapping": settings.mapping,
        "mean_features": mean_count(&settings.feature_counts),
        "candidate_ratio": settings.candidate_ratio,
        "seed": settings.seed,
        "tolerance": settings.tolerance,
        "max_rounds": settings.max_rounds,
        "topology": topology,
    });
    h.update(shared.to_string().as_bytes());
    for s in shards {
        h.update(format!("{:?}|{:?};", s.train_idx, s.test_idx).as_bytes());
    }
    hex::encode(h.finalize())
}

fn mean_count(counts: &[usize]) -> usize {
    let total: usize = counts.iter().sum();
    ((total as f64 / counts.len().max(1) as f64).round() as usize).max(1)
}

/// Deterministic per-node feature seed.
pub fn feature_seed(seed: u64, node: usize) -> u64 {
    seed ^ (node as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Chooses each node's features according to `kind`.
pub fn choose_features(kind: BaselineKind, settings: &MethodSettings, shards: &[Shard]) -> Result<Vec<FeatureSpec>> {
    let dim = shards
        .first()
        .ok_or_else(|| Error::Empty("no shards".into()))?
        .train_x
        .ncols();
    if settings.feature_counts.len() != shards.len() {
        return Err(Error::DimensionMismatch {
            expected: shards.len(),
            got: settings.feature_counts.len(),
        });
    }
    let shared = mean_count(&settings.feature_counts);
    match kind {
        BaselineKind::DklaRff => {
            let spec = sample_gaussian_features(dim, shared, settings.sigma, feature_seed(settings.seed, usize::MAX - 1), settings.mapping)?;
            Ok(vec![spec; shards.len()])
        }
        BaselineKind::DklaDdrf => {
            // the first node holding the most training data selects for everyone
            let largest = (0..shards.len())
                .max_by(|&a, &b| shards[a].n_train().cmp(&shards[b].n_train()).then(b.cmp(&a)))
                .expect("non-empty");
            let s = &shards[largest];
            let spec = select_data_dependent(
                s.train_x.view(),
                s.train_y.view(),
                shared,
                settings.candidate_ratio,
                settings.sigma,
                feature_seed(settings.seed, largest),
                settings.mapping,
            )?;
            Ok(vec![spec; shards.len()])
        }
        BaselineKind::DekrrDdrf => shards
            .iter()
            .zip(&settings.feature_counts)
            .enumerate()
            .map(|(j, (s, &count))| {
                select_data_dependent(
                    s.train_x.view(),
                    s.train_y.view(),
                    count,
                    settings.candidate_ratio,
                    settings.sigma,
                    feature_seed(settings.seed, j),
                    settings.mapping,
                )
            })
            .collect(),
    }
}

pub fn global_params(settings: &MethodSettings, shards: &[Shard]) -> GlobalParams {
    GlobalParams {
        lambda: settings.lambda,
        total: shards.iter().map(Shard::n_train).sum(),
        nodes: shards.len(),
    }
}

/// Runs one method end to end with the shared simulator and solver.
pub fn run_baseline(kind: BaselineKind, settings: &MethodSettings, topology: &Topology, shards: &[Shard]) -> Result<BaselineOutcome> {
    let specs = choose_features(kind, settings, shards)?;
    run_with_specs(kind, settings, topology, shards, specs)
}

/// Like [`run_baseline`] but with features already chosen.
pub fn run_with_specs(
    kind: BaselineKind,
    settings: &MethodSettings,
    topology: &Topology,
    shards: &[Shard],
    specs: Vec<FeatureSpec>,
) -> Result<BaselineOutcome> {
    let params = global_params(settings, shards);
    let penalties = Penalties::uniform(topology, params.total, settings.c_nei, settings.c_self_ratio)?;
    let feature_dims: Vec<usize> = specs.iter().map(FeatureSpec::feature_dim).collect();
    let nodes = shards
        .iter()
        .cloned()
        .zip(specs)
        .map(|(shard, spec)| LocalNode { shard, spec })
        .collect();
    let exchange = setup_exchange(topology, nodes, &penalties, &params, false)?;
    let probe = probe_set(shards, settings.probe_points, settings.seed);
    let opts = RunOptions {
        tolerance: settings.tolerance,
        max_rounds: settings.max_rounds,
        probe: Some(probe.clone()),
        ..RunOptions::default()
    };
    let result = run(exchange.states, topology, penalties, &params, &opts)?;
    let test_rse = test_rse(&result.states)?;
    let final_disagreement = consensus_disagreement(&result.states, topology, probe.view())?;
    Ok(BaselineOutcome {
        kind,
        comm: comm_cost(topology, &feature_dims, result.iterations()),
        comparability_hash: comparability_hash(settings, topology, shards),
        result,
        test_rse,
        feature_dims,
        final_disagreement,
    })
}

/// Outcome of the grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct CvChoice {
    pub lambda: f64,
    pub sigma: f64,
    /// `(λ, σ, mean validation RSE)` for every grid point.
    pub scores: Vec<(f64, f64, f64)>,
}

/// The grids used for hyperparameter search: `λ ∈ {10⁻⁸, …, 10⁻²}`,
/// `σ ∈ {2⁻², …, 2²}`.
pub fn default_grid() -> (Vec<f64>, Vec<f64>) {
    (
        (-8..=-2).map(|i| 10f64.powi(i)).collect(),
        (-2..=2).map(|i| 2f64.powi(i)).collect(),
    )
}

/// Random features used by the cross-validation surrogate.
pub const CV_SURROGATE_FEATURES: usize = 500;

/// K-fold grid search scored by the mean validation RSE of centralized
/// random-feature ridge regression. Ties go to the larger `λ`, then the
/// larger `σ`.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambdas: &[f64],
    sigmas: &[f64],
    folds: usize,
    seed: u64,
    surrogate_features: usize,
    mapping: MappingKind,
) -> Result<CvChoice> {
    if lambdas.is_empty() || sigmas.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    if folds < 2 || folds > x.nrows() {
        return Err(Error::invalid(format!("cannot make {folds} folds from {} rows", x.nrows())));
    }
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.shuffle(&mut rng_for(seed, 0x4356_0000));
    let sizes = crate::dataset::chunk_sizes(order.len(), folds);
    let mut fold_of = vec![0usize; x.nrows()];
    let mut start = 0;
    for (f, &s) in sizes.iter().enumerate() {
        for &i in &order[start..start + s] {
            fold_of[i] = f;
        }
        start += s;
    }
    let split = |f: usize| {
        let (val, train): (Vec<usize>, Vec<usize>) = (0..x.nrows()).partition(|&i| fold_of[i] == f);
        (train, val)
    };
    let mut scores = Vec::with_capacity(lambdas.len() * sigmas.len());
    for &sigma in sigmas {
        let spec = sample_gaussian_features(x.ncols(), surrogate_features, sigma, feature_seed(seed, usize::MAX), mapping)?;
        let z_all = spec.matrix(x)?;
        for &lambda in lambdas {
            let mut total = 0.0;
            for f in 0..folds {
                let (train, val) = split(f);
                let z_train = z_all.select(Axis(1), &train);
                let y_train = y.select(Axis(0), &train);
                let mut a = z_train.dot(&z_train.t());
                for i in 0..a.nrows() {
                    a[[i, i]] += lambda * train.len() as f64;
                }
                let ch = Cholesky::factor(a.view()).map_err(|pivot| Error::NotPositiveDefinite { node: 0, pivot })?;
                let theta = ch.solve(z_train.dot(&y_train).view());
                let pred = z_all.select(Axis(1), &val).t().dot(&theta);
                total += rse(pred.view(), y.select(Axis(0), &val).view())?;
            }
            scores.push((lambda, sigma, total / folds as f64));
        }
    }
    let best = scores
        .iter()
        .copied()
        .min_by(|a, b| {
            a.2.total_cmp(&b.2)
                .then(b.0.total_cmp(&a.0))
                .then(b.1.total_cmp(&a.1))
        })
        .expect("non-empty grid");
    Ok(CvChoice {
        lambda: best.0,
        sigma: best.1,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rse_examples() {
        let y = array![1.0, -1.0, 0.5];
        assert_eq!(rse(y.view(), y.view()).unwrap(), 0.0);
        let mean = Array1::from_elem(3, y.mean().unwrap());
        assert!((rse(mean.view(), y.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rse(array![0.0, 1.0].view(), array![1.0, -1.0].view()).unwrap(), 2.5);
        assert!(rse(array![0.0, 1.0].view(), array![2.0, 2.0].view()).is_err());
        assert!(rse(array![0.0].view(), array![2.0].view()).is_err());
    }

    #[test]
    fn krr_single_point() {
        let p = centralized_krr(array![[0.3, 0.1]].view(), array![0.8].view(), 0.25, 1.0).unwrap();
        match p {
            Predictor::Kernel { alpha, .. } => assert!((alpha[0] - 0.8 / 1.25).abs() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn krr_residual_and_shrinkage() {
        let mut rng = rng_for(1, 1);
        use rand::Rng;
        let x = Array2::from_shape_simple_fn((12, 3), || rng.random::<f64>());
        let y = Array1::from_shape_simple_fn(12, || rng.random::<f64>() - 0.5);
        let mut norms = Vec::new();
        for lambda in [1.0, 10.0, 100.0] {
            let Predictor::Kernel { alpha, .. } = centralized_krr(x.view(), y.view(), lambda, 0.5).unwrap() else {
                unreachable!()
            };
            let mut k = kernel_matrix(x.view(), 0.5);
            for i in 0..12 {
                k[[i, i]] += lambda * 12.0;
            }
            let r = k.dot(&alpha) - &y;
            assert!(r.dot(&r).sqrt() <= 1e-8);
            norms.push(alpha.dot(&alpha).sqrt());
        }
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn krr_guard() {
        let x = Array2::<f64>::zeros((KRR_MAX_POINTS + 1, 1));
        let y = Array1::<f64>::zeros(KRR_MAX_POINTS + 1);
        assert!(centralized_krr(x.view(), y.view(), 1.0, 1.0).is_err());
    }

    #[test]
    fn baseline_names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("admm".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn single_grid_point_is_returned() {
        let x = Array2::from_shape_fn((20, 2), |(i, c)| (i * (c + 1)) as f64 / 20.0);
        let y = x.column(0).mapv(|v| (3.0 * v).sin());
        let cv = cross_validate(x.view(), y.view(), &[1e-3], &[0.5], 4, 0, 50, MappingKind::CosWithPhase).unwrap();
        assert_eq!((cv.lambda, cv.sigma), (1e-3, 0.5));
        assert_eq!(cv.scores.len(), 1);
    }
}
