//! In-process simulation of the decentralized algorithm: the pre-iteration
//! exchange of feature specs and feature blocks, synchronous rounds of
//! coefficient exchange and closed-form local updates, stop rules, and an
//! exact count of transmitted scalars.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Shard;
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::graph::Topology;
use crate::snapshot::write_snapshot;
use crate::solver::{
    build_aux, effective_lambda, local_update, objective_quadratic_scaled, GlobalParams, NeighborBlocks, NodeBlocks, NodeState,
    Penalties,
};

/// A node before the exchange: its data and its chosen features.
#[derive(Debug, Clone)]
pub struct LocalNode {
    pub shard: Shard,
    pub spec: FeatureSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Spec(FeatureSpec),
    /// `Z_i(X_j)` with `i = features_of`, `j = data_of`.
    ZBlock {
        features_of: usize,
        data_of: usize,
        block: Array2<f64>,
    },
    Theta(Array1<f64>),
}

impl Payload {
    pub fn scalars(&self) -> usize {
        match self {
            Payload::Spec(s) => s.frequencies().len() + s.phases().map_or(0, |b| b.len()) + 1,
            Payload::ZBlock { block, .. } => block.len(),
            Payload::Theta(t) => t.len(),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::Spec(_) => "feature_spec",
            Payload::ZBlock { .. } => "z_block",
            Payload::Theta(_) => "theta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    /// `None` during the pre-iteration exchange.
    pub round: Option<usize>,
    pub payload: Payload,
}

/// Per-node FIFO inboxes. Payloads are immutable once enqueued.
struct Network {
    inboxes: Vec<VecDeque<Message>>,
    trace: Option<Vec<Message>>,
    scalars: usize,
}

impl Network {
    fn new(nodes: usize, trace: bool) -> Self {
        Network {
            inboxes: vec![VecDeque::new(); nodes],
            trace: trace.then(Vec::new),
            scalars: 0,
        }
    }

    fn send(&mut self, msg: Message) {
        self.scalars += msg.payload.scalars();
        if let Some(t) = &mut self.trace {
            t.push(msg.clone());
        }
        self.inboxes[msg.to].push_back(msg);
    }

    fn drain(&mut self, node: usize) -> Vec<Message> {
        self.inboxes[node].drain(..).collect()
    }
}

/// Output of [`setup_exchange`].
#[derive(Debug, Clone)]
pub struct Exchange {
    pub states: Vec<NodeState>,
    pub messages: usize,
    pub scalars: usize,
    pub trace: Option<Vec<Message>>,
}

/// Pre-iteration protocol. Every node sends its spec and `Z_j(X_j)` to each
/// neighbour; each neighbour evaluates the received spec on its own data and
/// returns that block. Raw samples never enter a message. Afterwards each
/// node builds its auxiliary matrices.
pub fn setup_exchange(
    topology: &Topology,
    nodes: Vec<LocalNode>,
    penalties: &Penalties,
    params: &GlobalParams,
    trace: bool,
) -> Result<Exchange> {
    topology.validate()?;
    let count = topology.nodes();
    if nodes.len() != count || penalties.nodes() != count {
        return Err(Error::DimensionMismatch {
            expected: count,
            got: nodes.len(),
        });
    }
    let mut net = Network::new(count, trace);
    let own: Vec<Array2<f64>> = nodes
        .par_iter()
        .map(|n| n.spec.matrix(n.shard.train_x.view()))
        .collect::<Result<_>>()?;

    for j in 0..count {
        for &p in topology.neighbors(j) {
            net.send(Message {
                from: j,
                to: p,
                round: None,
                payload: Payload::Spec(nodes[j].spec.clone()),
            });
            net.send(Message {
                from: j,
                to: p,
                round: None,
                payload: Payload::ZBlock {
                    features_of: j,
                    data_of: j,
                    block: own[j].clone(),
                },
            });
        }
    }

    // Received specs and blocks, keyed by sender.
    let mut specs: Vec<Vec<(usize, FeatureSpec)>> = vec![Vec::new(); count];
    let mut theirs_own: Vec<Vec<(usize, Array2<f64>)>> = vec![Vec::new(); count];
    let mut theirs_on_mine: Vec<Vec<(usize, Array2<f64>)>> = vec![Vec::new(); count];
    // every node reads its first-phase inbox before any reply is sent
    let first: Vec<Vec<Message>> = (0..count).map(|j| net.drain(j)).collect();
    for (j, inbox) in first.into_iter().enumerate() {
        for msg in inbox {
            match msg.payload {
                Payload::Spec(s) => specs[j].push((msg.from, s)),
                Payload::ZBlock { block, .. } => theirs_own[j].push((msg.from, block)),
                Payload::Theta(_) => unreachable!("no coefficients before iterating"),
            }
        }
        for (p, spec) in &specs[j] {
            let block = spec.matrix(nodes[j].shard.train_x.view())?;
            theirs_on_mine[j].push((*p, block.clone()));
            net.send(Message {
                from: j,
                to: *p,
                round: None,
                payload: Payload::ZBlock {
                    features_of: *p,
                    data_of: j,
                    block,
                },
            });
        }
    }
    let mut mine_on_theirs: Vec<Vec<(usize, Array2<f64>)>> = vec![Vec::new(); count];
    for (j, slot) in mine_on_theirs.iter_mut().enumerate() {
        for msg in net.drain(j) {
            match msg.payload {
                Payload::ZBlock { block, .. } => slot.push((msg.from, block)),
                other => unreachable!("unexpected {} in return phase", other.type_name()),
            }
        }
    }

    let take = |list: &mut Vec<(usize, Array2<f64>)>, p: usize| -> Array2<f64> {
        let at = list.iter().position(|(q, _)| *q == p).expect("one block per neighbour");
        list.swap_remove(at).1
    };
    let mut states = Vec::with_capacity(count);
    for (j, (node, own_block)) in nodes.into_iter().zip(own).enumerate() {
        let neighbors = topology
            .neighbors(j)
            .iter()
            .map(|&p| NeighborBlocks {
                id: p,
                mine_on_theirs: take(&mut mine_on_theirs[j], p),
                theirs_on_mine: take(&mut theirs_on_mine[j], p),
                theirs_own: take(&mut theirs_own[j], p),
            })
            .collect();
        let blocks = NodeBlocks {
            own: own_block,
            neighbors,
        };
        states.push((j, node, blocks));
    }
    let states = states
        .into_par_iter()
        .map(|(j, node, blocks)| {
            let aux = build_aux(j, &blocks, node.shard.train_y.view(), penalties, params)?;
            Ok(NodeState {
                id: j,
                lambda_local: effective_lambda(params.lambda, params.total, params.nodes, node.shard.n_train())?,
                theta: Array1::zeros(node.spec.feature_dim()),
                shard: node.shard,
                spec: node.spec,
                blocks,
                aux,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Exchange {
        messages: net.trace.as_ref().map_or(0, Vec::len),
        scalars: net.scalars,
        trace: net.trace,
        states,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxRounds,
    SafeguardCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub objective: f64,
    pub max_dtheta: f64,
    /// Decision-function disagreement on the probe set, when one is given.
    pub disagreement: Option<f64>,
    pub cum_scalars: usize,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Relative coefficient-change tolerance `ε`.
    pub tolerance: f64,
    pub max_rounds: usize,
    /// Update nodes concurrently within a round.
    pub parallel: bool,
    /// Double every `c̃_self` whenever the objective rises.
    pub safeguard: bool,
    /// Probe points (rows) for the disagreement diagnostic.
    pub probe: Option<Array2<f64>>,
    pub trace: bool,
    pub keep_trajectory: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            tolerance: 1e-6,
            max_rounds: 2000,
            parallel: true,
            safeguard: true,
            probe: None,
            trace: false,
            keep_trajectory: false,
        }
    }
}

/// Relative round-off allowance on the magnitude of the objective's terms.
pub const ROUNDOFF_SLACK: f64 = 1e-12;

/// Largest allowed cumulative `c̃_self` growth from the safeguard: `2²⁰`.
pub const SAFEGUARD_CAP_DOUBLINGS: u32 = 20;

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub states: Vec<NodeState>,
    pub rounds: Vec<RoundLog>,
    pub termination: Termination,
    pub penalties: Penalties,
    pub safeguard_doublings: u32,
    pub trace: Option<Vec<Message>>,
    /// Per-round coefficients when requested, starting with the zero start.
    pub trajectory: Option<Vec<Vec<Array1<f64>>>>,
}

impl TrainResult {
    pub fn last(&self) -> &RoundLog {
        self.rounds.last().expect("at least one round is logged")
    }

    /// Number of update rounds executed (round 0 is the initial state).
    pub fn iterations(&self) -> usize {
        self.last().round
    }

    /// `round,objective,max_dtheta,disagreement,cum_scalars`.
    pub fn write_round_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "round,objective,max_dtheta,disagreement,cum_scalars")?;
        for r in &self.rounds {
            let dis = r.disagreement.map(|v| format!("{v:.12e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:.12e},{:.12e},{},{}",
                r.round, r.objective, r.max_dtheta, dis, r.cum_scalars
            )?;
        }
        Ok(())
    }

    /// `<base>.json` manifest plus `<base>.bin` with one `θ_j` row per node.
    pub fn write_snapshot(&self, base: impl AsRef<Path>) -> Result<()> {
        let thetas: Vec<Array2<f64>> = self
            .states
            .iter()
            .map(|s| s.theta.clone().insert_axis(ndarray::Axis(0)))
            .collect();
        let blocks: Vec<(String, ArrayView2<f64>)> = thetas
            .iter()
            .enumerate()
            .map(|(j, t)| (format!("theta_{j}"), t.view()))
            .collect();
        let meta = serde_json::json!({
            "termination": self.termination,
            "rounds": self.iterations(),
            "final_objective": self.last().objective,
            "safeguard_doublings": self.safeguard_doublings,
            "feature_dims": self.states.iter().map(|s| s.spec.feature_dim()).collect::<Vec<_>>(),
        });
        write_snapshot(base, &blocks, meta)
    }
}

/// Dumps one node's auxiliary matrices as a snapshot.
pub fn write_aux_snapshot(state: &NodeState, base: impl AsRef<Path>) -> Result<()> {
    let g = state.aux.g_dense();
    let d = state.aux.d.clone().insert_axis(ndarray::Axis(1));
    let mut blocks: Vec<(String, ArrayView2<f64>)> = vec![
        ("G".into(), g.view()),
        ("d".into(), d.view()),
        ("S".into(), state.aux.s.view()),
    ];
    for (p, m) in &state.aux.p {
        blocks.push((format!("P_{p}"), m.view()));
    }
    write_snapshot(
        base,
        &blocks,
        serde_json::json!({"node": state.id, "tilde_self": state.aux.tilde_self()}),
    )
}

/// `max over edges (j,p)` of the mean absolute gap between `f_j` and `f_p`,
/// given each node's features evaluated on the probe set.
fn disagreement_from(probe_features: &[Array2<f64>], thetas: &[Array1<f64>], topology: &Topology) -> f64 {
    let preds: Vec<Array1<f64>> = probe_features
        .iter()
        .zip(thetas)
        .map(|(z, t)| z.t().dot(t))
        .collect();
    topology
        .edges()
        .iter()
        .map(|&(j, p)| {
            let m = preds[j].len() as f64;
            preds[j].iter().zip(&preds[p]).map(|(a, b)| (a - b).abs()).sum::<f64>() / m
        })
        .fold(0.0, f64::max)
}

/// Runs synchronous rounds from the current coefficients (zero after
/// [`setup_exchange`]) until the relative change
/// `max_j ‖Δθ_j‖/max(1, ‖θ_j‖)` drops to the tolerance or the round limit is
/// reached.
pub fn run(
    mut states: Vec<NodeState>,
    topology: &Topology,
    mut penalties: Penalties,
    params: &GlobalParams,
    opts: &RunOptions,
) -> Result<TrainResult> {
    let count = states.len();
    if topology.nodes() != count {
        return Err(Error::DimensionMismatch {
            expected: topology.nodes(),
            got: count,
        });
    }
    let probe_features: Option<Vec<Array2<f64>>> = match &opts.probe {
        Some(probe) => Some(
            states
                .iter()
                .map(|s| s.spec.matrix(probe.view()))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let disagreement = |states: &[NodeState]| {
        probe_features.as_ref().map(|z| {
            let thetas: Vec<Array1<f64>> = states.iter().map(|s| s.theta.clone()).collect();
            disagreement_from(z, &thetas, topology)
        })
    };

    let mut net = Network::new(count, opts.trace);
    let (mut current, _) = objective_quadratic_scaled(&states, params);
    let base_slack = 1e-12 * current.abs().max(1.0);
    let mut rounds = vec![RoundLog {
        round: 0,
        objective: current,
        max_dtheta: 0.0,
        disagreement: disagreement(&states),
        cum_scalars: 0,
    }];
    let mut trajectory = opts
        .keep_trajectory
        .then(|| vec![states.iter().map(|s| s.theta.clone()).collect::<Vec<_>>()]);
    let mut doublings = 0u32;
    let mut termination = Termination::MaxRounds;

    for k in 0..opts.max_rounds {
        let round = k + 1;
        for st in &states {
            for nb in topology.neighbors(st.id) {
                net.send(Message {
                    from: st.id,
                    to: *nb,
                    round: Some(k),
                    payload: Payload::Theta(st.theta.clone()),
                });
            }
        }
        let inboxes: Vec<Vec<Message>> = (0..count).map(|j| net.drain(j)).collect();
        let update = |st: &NodeState| -> Result<Array1<f64>> {
            let inbox = &inboxes[st.id];
            let received: Vec<ArrayView1<f64>> = st
                .aux
                .p
                .iter()
                .map(|(p, _)| {
                    inbox
                        .iter()
                        .find_map(|m| match &m.payload {
                            Payload::Theta(t) if m.from == *p => Some(t.view()),
                            _ => None,
                        })
                        .expect("every neighbour sends its coefficients")
                })
                .collect();
            let next = local_update(&st.aux, st.theta.view(), &received)?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    node: st.id,
                    round: k,
                });
            }
            Ok(next)
        };
        let next: Vec<Array1<f64>> = if opts.parallel {
            states.par_iter().map(update).collect::<Result<_>>()?
        } else {
            states.iter().map(update).collect::<Result<_>>()?
        };

        let previous: Vec<Array1<f64>> = states
            .iter_mut()
            .zip(next)
            .map(|(st, th)| std::mem::replace(&mut st.theta, th))
            .collect();
        let (value, scale) = objective_quadratic_scaled(&states, params);
        // rises within the evaluation round-off are not increases
        let slack = base_slack + ROUNDOFF_SLACK * scale;

        if opts.safeguard && value > current + slack {
            // reject the step, stiffen the self penalty and retry from θᵏ
            for (st, th) in states.iter_mut().zip(previous) {
                st.theta = th;
            }
            doublings += 1;
            if doublings > SAFEGUARD_CAP_DOUBLINGS {
                rounds.push(RoundLog {
                    round,
                    objective: current,
                    max_dtheta: 0.0,
                    disagreement: disagreement(&states),
                    cum_scalars: net.scalars,
                });
                termination = Termination::SafeguardCap;
                break;
            }
            penalties.scale_self(2.0);
            for st in states.iter_mut() {
                st.aux.set_tilde_self(penalties.tilde_self(st.id))?;
            }
            rounds.push(RoundLog {
                round,
                objective: current,
                max_dtheta: 0.0,
                disagreement: disagreement(&states),
                cum_scalars: net.scalars,
            });
            if let Some(t) = &mut trajectory {
                t.push(states.iter().map(|s| s.theta.clone()).collect());
            }
            continue;
        }

        let mut max_step = 0.0f64;
        let mut max_relative = 0.0f64;
        for (st, old) in states.iter().zip(&previous) {
            let step = (&st.theta - old).dot(&(&st.theta - old)).sqrt();
            max_step = max_step.max(step);
            max_relative = max_relative.max(step / old.dot(old).sqrt().max(1.0));
        }
        current = value;
        rounds.push(RoundLog {
            round,
            objective: value,
            max_dtheta: max_step,
            disagreement: disagreement(&states),
            cum_scalars: net.scalars,
        });
        if let Some(t) = &mut trajectory {
            t.push(states.iter().map(|s| s.theta.clone()).collect());
        }
        if max_relative <= opts.tolerance {
            termination = Termination::Tolerance;
            break;
        }
    }

    Ok(TrainResult {
        states,
        rounds,
        termination,
        penalties,
        safeguard_doublings: doublings,
        trace: net.trace,
        trajectory,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCost {
    pub per_round: usize,
    pub total: usize,
}

/// Scalars sent per round, `Σ_j |N_j|·(feature dim of j)`, and over `rounds`.
pub fn comm_cost(topology: &Topology, feature_dims: &[usize], rounds: usize) -> CommCost {
    let per_round = (0..topology.nodes())
        .map(|j| topology.degree(j) * feature_dims[j])
        .sum();
    CommCost {
        per_round,
        total: per_round * rounds,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Equal,
    SqrtProportional,
}

impl std::str::FromStr for Allocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(Allocation::Equal),
            "sqrt_proportional" => Ok(Allocation::SqrtProportional),
            other => Err(Error::invalid(format!("unknown allocation strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for Allocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Allocation::Equal => "equal",
            Allocation::SqrtProportional => "sqrt_proportional",
        })
    }
}

/// Per-node feature counts with mean `mean_budget`.
///
/// `SqrtProportional` rounds `√N_j·J·D̄/Σ_p√N_p` and then corrects the
/// rounding residue one unit at a time, visiting nodes from the largest
/// shard down, so that the total is exactly `J·D̄` and no node drops below 1.
pub fn allocate_features(sizes: &[usize], mean_budget: usize, strategy: Allocation) -> Result<Vec<usize>> {
    let nodes = sizes.len();
    if nodes == 0 {
        return Err(Error::invalid("no nodes to allocate features to"));
    }
    if mean_budget == 0 {
        return Err(Error::invalid(format!(
            "a mean budget of 0 features cannot cover {nodes} nodes"
        )));
    }
    match strategy {
        Allocation::Equal => Ok(vec![mean_budget; nodes]),
        Allocation::SqrtProportional => {
            let total = nodes * mean_budget;
            let roots: Vec<f64> = sizes.iter().map(|&n| (n as f64).sqrt()).collect();
            let sum: f64 = roots.iter().sum();
            if !(sum > 0.0) {
                return Err(Error::invalid("all shards are empty"));
            }
            let mut alloc: Vec<usize> = roots
                .iter()
                .map(|r| ((r * total as f64 / sum).round() as usize).max(1))
                .collect();
            let mut order: Vec<usize> = (0..nodes).collect();
            order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(b.cmp(&a)));
            let mut assigned: usize = alloc.iter().sum();
            let mut cursor = 0;
            let mut idle = 0;
            while assigned != total {
                let j = order[cursor % nodes];
                cursor += 1;
                if assigned < total {
                    alloc[j] += 1;
                    assigned += 1;
                    idle = 0;
                } else if alloc[j] > 1 {
                    alloc[j] -= 1;
                    assigned -= 1;
                    idle = 0;
                } else {
                    idle += 1;
                    if idle > nodes {
                        return Err(Error::invalid("budget too small to give every node a feature"));
                    }
                }
            }
            Ok(alloc)
        }
    }
}
