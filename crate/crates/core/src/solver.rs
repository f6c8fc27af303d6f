//! Per-node mathematics of the decentralized solver.
//!
//! Notation used in comments: `Z_{i,j}` is node `i`'s feature map applied to
//! node `j`'s training data, a `(feature dim of i) × N_j` matrix. `c̃` are the
//! penalty coefficients after scaling by `1/(N·|N̂_j|)`.
//!
//! Node `j` minimizes its local function
//!
//! ```text
//! S_j(θ) = (1/N)‖θᵀZ_jj − Y_j‖² + (λ/J)‖θ‖²
//!        + Σ_{p∈N_j} c̃_{j,nei}‖θᵀZ_jj − θ_pᵀZ_pj‖²
//!        + Σ_{p∈N_j} c̃_{p,nei}‖θᵀZ_jp − θ_pᵀZ_pp‖²
//!        + 2c̃_{j,self}‖θᵀZ_jj − θ_jᵏᵀZ_jj‖²
//! ```
//!
//! whose last term anchors the update at the current iterate `θ_jᵏ`. Setting
//! its gradient to zero gives `θ_j′ = G_j(d_j + S_jθ_jᵏ + Σ_p P_{j,p}θ_p)`.

use ndarray::{Array1, Array2, ArrayView1};

use crate::dataset::Shard;
use crate::error::{Error, Result};
use crate::features::FeatureSpec;
use crate::graph::Topology;
use crate::linalg::{gram, symmetric_eigenvalues, Cholesky};

/// Problem-wide constants shared by every node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalParams {
    /// Global ridge parameter `λ`.
    pub lambda: f64,
    /// Total training points `N` over all nodes.
    pub total: usize,
    /// Node count `J`.
    pub nodes: usize,
}

/// `λ_j = λN/(J·N_j)`, so that `(N_j/N)·λ_j = λ/J`.
pub fn effective_lambda(lambda: f64, total: usize, nodes: usize, local: usize) -> Result<f64> {
    if local == 0 {
        return Err(Error::invalid("node holds no training data"));
    }
    if nodes == 0 || total == 0 {
        return Err(Error::invalid("node and sample counts must be positive"));
    }
    Ok(lambda * total as f64 / (nodes as f64 * local as f64))
}

/// Raw penalty coefficients `c_{j,nei}`, `c_{j,self}` per node together with
/// what is needed to scale them.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    c_nei: Vec<f64>,
    c_self: Vec<f64>,
    total: usize,
    hat_sizes: Vec<usize>,
}

impl Penalties {
    pub fn new(topology: &Topology, total: usize, c_nei: Vec<f64>, c_self: Vec<f64>) -> Result<Self> {
        let n = topology.nodes();
        if c_nei.len() != n || c_self.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: c_nei.len().min(c_self.len()),
            });
        }
        if c_nei.iter().chain(&c_self).any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::invalid("penalty coefficients must be positive and finite"));
        }
        if total == 0 {
            return Err(Error::invalid("total sample count must be positive"));
        }
        Ok(Penalties {
            c_nei,
            c_self,
            total,
            hat_sizes: (0..n).map(|j| topology.degree(j) + 1).collect(),
        })
    }

    /// Same `c_nei` everywhere and `c_self = ratio · c_nei`.
    pub fn uniform(topology: &Topology, total: usize, c_nei: f64, self_ratio: f64) -> Result<Self> {
        let n = topology.nodes();
        Penalties::new(topology, total, vec![c_nei; n], vec![self_ratio * c_nei; n])
    }

    pub fn nodes(&self) -> usize {
        self.c_nei.len()
    }

    pub fn c_nei(&self, j: usize) -> f64 {
        self.c_nei[j]
    }

    pub fn c_self(&self, j: usize) -> f64 {
        self.c_self[j]
    }

    fn scale(&self, j: usize) -> f64 {
        self.total as f64 * self.hat_sizes[j] as f64
    }

    /// `c̃_{j,nei} = c_{j,nei}/(N·|N̂_j|)`.
    pub fn tilde_nei(&self, j: usize) -> f64 {
        self.c_nei[j] / self.scale(j)
    }

    /// `c̃_{j,self} = c_{j,self}/(N·|N̂_j|)`.
    pub fn tilde_self(&self, j: usize) -> f64 {
        self.c_self[j] / self.scale(j)
    }

    pub fn set_tilde_self(&mut self, j: usize, value: f64) {
        self.c_self[j] = value * self.scale(j);
    }

    pub fn scale_self(&mut self, factor: f64) {
        for c in &mut self.c_self {
            *c *= factor;
        }
    }
}

/// Feature blocks a neighbour `p` contributes to node `j`.
#[derive(Debug, Clone)]
pub struct NeighborBlocks {
    pub id: usize,
    /// `Z_{j,p}`: node j's features on p's data, computed by p.
    pub mine_on_theirs: Array2<f64>,
    /// `Z_{p,j}`: p's features on j's data, computed locally from p's spec.
    pub theirs_on_mine: Array2<f64>,
    /// `Z_{p,p}`: received from p.
    pub theirs_own: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct NodeBlocks {
    /// `Z_{j,j}`.
    pub own: Array2<f64>,
    pub neighbors: Vec<NeighborBlocks>,
}

impl NodeBlocks {
    pub fn feature_dim(&self) -> usize {
        self.own.nrows()
    }
}

/// Local matrices built once before iterating. `G_j` is kept as a Cholesky
/// factor of its inverse, so applying `G_j` means two triangular solves.
#[derive(Debug, Clone)]
pub struct AuxMatrices {
    node: usize,
    /// Bracketed matrix without the `2c̃_self·Z_jjZ_jjᵀ` term.
    base: Array2<f64>,
    own_gram: Array2<f64>,
    tilde_self: f64,
    factor: Cholesky,
    /// `d_j = (1/N)·Z_jj Y_jᵀ`.
    pub d: Array1<f64>,
    /// `S_j = 2c̃_self·Z_jjZ_jjᵀ`.
    pub s: Array2<f64>,
    /// `(p, P_{j,p})` in neighbour order.
    pub p: Vec<(usize, Array2<f64>)>,
}

impl AuxMatrices {
    pub fn node(&self) -> usize {
        self.node
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn tilde_self(&self) -> f64 {
        self.tilde_self
    }

    /// `G_j v`.
    pub fn apply_g(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.factor.solve(v)
    }

    /// Dense `G_j`, for diagnostics.
    pub fn g_dense(&self) -> Array2<f64> {
        self.factor.inverse()
    }

    /// The matrix `G_j⁻¹`.
    pub fn g_inverse(&self) -> Array2<f64> {
        &self.base + &(2.0 * self.tilde_self * &self.own_gram)
    }

    /// Replaces `c̃_self` and refactors.
    pub fn set_tilde_self(&mut self, tilde_self: f64) -> Result<()> {
        self.tilde_self = tilde_self;
        self.s = 2.0 * tilde_self * &self.own_gram;
        let bracket = self.g_inverse();
        self.factor = Cholesky::factor(bracket.view()).map_err(|pivot| Error::NotPositiveDefinite {
            node: self.node,
            pivot,
        })?;
        Ok(())
    }
}

/// Builds `G_j`, `d_j`, `S_j` and `P_{j,p}` for node `j`.
pub fn build_aux(
    node: usize,
    blocks: &NodeBlocks,
    targets: ArrayView1<f64>,
    penalties: &Penalties,
    params: &GlobalParams,
) -> Result<AuxMatrices> {
    let own = &blocks.own;
    if own.ncols() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: own.ncols(),
            got: targets.len(),
        });
    }
    let dim = own.nrows();
    let inv_n = 1.0 / params.total as f64;
    let local_lambda = effective_lambda(params.lambda, params.total, params.nodes, targets.len())?;
    // (N_j/N)·λ_j, which is λ/J
    let ridge = targets.len() as f64 * inv_n * local_lambda;
    let c_nei = penalties.tilde_nei(node);
    let own_gram = gram(own.view());

    let mut base = (inv_n + blocks.neighbors.len() as f64 * c_nei) * &own_gram;
    for i in 0..dim {
        base[[i, i]] += ridge;
    }
    let mut p = Vec::with_capacity(blocks.neighbors.len());
    for nb in &blocks.neighbors {
        let c_p = penalties.tilde_nei(nb.id);
        if nb.mine_on_theirs.nrows() != dim || nb.theirs_on_mine.ncols() != own.ncols() {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: nb.mine_on_theirs.nrows(),
            });
        }
        base.scaled_add(c_p, &gram(nb.mine_on_theirs.view()));
        let pjp = c_nei * own.dot(&nb.theirs_on_mine.t())
            + c_p * nb.mine_on_theirs.dot(&nb.theirs_own.t());
        p.push((nb.id, pjp));
    }
    let d = inv_n * own.dot(&targets);
    let tilde_self = penalties.tilde_self(node);
    let s = 2.0 * tilde_self * &own_gram;
    let bracket = &base + &s;
    let factor = Cholesky::factor(bracket.view())
        .map_err(|pivot| Error::NotPositiveDefinite { node, pivot })?;
    Ok(AuxMatrices {
        node,
        base,
        own_gram,
        tilde_self,
        factor,
        d,
        s,
        p,
    })
}

/// Closed-form minimizer of `S_j`: `G_j(d_j + S_jθ_j + Σ_p P_{j,p}θ_p)`.
/// `neighbors` follows the order of `aux.p`.
pub fn local_update(aux: &AuxMatrices, theta: ArrayView1<f64>, neighbors: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    if theta.len() != aux.dim() {
        return Err(Error::DimensionMismatch {
            expected: aux.dim(),
            got: theta.len(),
        });
    }
    if neighbors.len() != aux.p.len() {
        return Err(Error::DimensionMismatch {
            expected: aux.p.len(),
            got: neighbors.len(),
        });
    }
    let mut rhs = &aux.d + &aux.s.dot(&theta);
    for ((_, pjp), th) in aux.p.iter().zip(neighbors) {
        if pjp.ncols() != th.len() {
            return Err(Error::DimensionMismatch {
                expected: pjp.ncols(),
                got: th.len(),
            });
        }
        rhs += &pjp.dot(th);
    }
    Ok(aux.apply_g(rhs.view()))
}

/// One node after the pre-iteration exchange.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    pub shard: Shard,
    pub spec: FeatureSpec,
    pub theta: Array1<f64>,
    pub lambda_local: f64,
    pub blocks: NodeBlocks,
    pub aux: AuxMatrices,
}

impl NodeState {
    /// `f_j(x) = θ_jᵀ z_j(x)` for samples in the rows of `x`.
    pub fn predict(&self, x: ndarray::ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.spec.matrix(x)?.t().dot(&self.theta))
    }

    pub fn neighbor_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.neighbors.iter().map(|nb| nb.id)
    }
}

fn squared(v: &Array1<f64>) -> f64 {
    v.dot(v)
}

/// Global objective
/// `Σ_j (1/N)‖θ_jᵀZ_jj − Y_j‖² + (λ/J)‖θ_j‖² + Σ_{p∈N_j} c̃_{j,nei}‖θ_jᵀZ_jj − θ_pᵀZ_pj‖²`.
/// The `p = j` penalty vanishes identically and is skipped.
pub fn objective(states: &[NodeState], penalties: &Penalties, params: &GlobalParams) -> f64 {
    let inv_n = 1.0 / params.total as f64;
    let ridge = params.lambda / params.nodes as f64;
    states
        .iter()
        .map(|st| {
            let fit = st.blocks.own.t().dot(&st.theta);
            let mut value = inv_n * squared(&(&fit - &st.shard.train_y)) + ridge * squared(&st.theta);
            let c = penalties.tilde_nei(st.id);
            for nb in &st.blocks.neighbors {
                let other = nb.theirs_on_mine.t().dot(&states[nb.id].theta);
                value += c * squared(&(&fit - &other));
            }
            value
        })
        .sum()
}

/// [`objective`] evaluated through the auxiliary matrices as the quadratic
/// form `Σ_j θ_jᵀ(G_j⁻¹ − S_j)θ_j − 2d_jᵀθ_j − θ_jᵀΣ_p P_{j,p}θ_p + ‖Y_j‖²/N`.
/// Costs `O(D_j²)` per node instead of `O(D_j N_j)`; agrees with
/// [`objective`] up to round-off.
pub fn objective_quadratic(states: &[NodeState], params: &GlobalParams) -> f64 {
    objective_quadratic_scaled(states, params).0
}

/// [`objective_quadratic`] together with the sum of the absolute values of
/// its terms, which bounds the round-off of the cancelling sum.
pub fn objective_quadratic_scaled(states: &[NodeState], params: &GlobalParams) -> (f64, f64) {
    let inv_n = 1.0 / params.total as f64;
    states.iter().fold((0.0, 0.0), |(value, scale), st| {
        let aux = &st.aux;
        let curvature = st.theta.dot(&aux.base.dot(&st.theta));
        let linear = 2.0 * aux.d.dot(&st.theta);
        let coupling: f64 = aux.p.iter().map(|(p, pjp)| st.theta.dot(&pjp.dot(&states[*p].theta))).sum();
        let constant = inv_n * squared(&st.shard.train_y);
        (
            value + curvature - linear - coupling + constant,
            scale + curvature.abs() + linear.abs() + coupling.abs() + constant,
        )
    })
}

/// Gradient of [`objective`] with respect to every `θ_j`.
pub fn objective_gradient(states: &[NodeState], penalties: &Penalties, params: &GlobalParams) -> Vec<Array1<f64>> {
    let inv_n = 1.0 / params.total as f64;
    let ridge = params.lambda / params.nodes as f64;
    let mut grads: Vec<Array1<f64>> = states
        .iter()
        .map(|st| 2.0 * ridge * &st.theta)
        .collect();
    for st in states {
        let fit = st.blocks.own.t().dot(&st.theta);
        grads[st.id] += &(2.0 * inv_n * st.blocks.own.dot(&(&fit - &st.shard.train_y)));
        let c = penalties.tilde_nei(st.id);
        for nb in &st.blocks.neighbors {
            let diff = &fit - &nb.theirs_on_mine.t().dot(&states[nb.id].theta);
            grads[st.id] += &(2.0 * c * st.blocks.own.dot(&diff));
            grads[nb.id] -= &(2.0 * c * nb.theirs_on_mine.dot(&diff));
        }
    }
    grads
}

/// Value of the local function `S_j(θ)` anchored at `anchor = θ_jᵏ`, with
/// neighbour coefficients in the order of `state.blocks.neighbors`.
pub fn local_objective(
    state: &NodeState,
    theta: ArrayView1<f64>,
    anchor: ArrayView1<f64>,
    neighbors: &[ArrayView1<f64>],
    penalties: &Penalties,
    params: &GlobalParams,
) -> f64 {
    let inv_n = 1.0 / params.total as f64;
    let j = state.id;
    let own = &state.blocks.own;
    let fit = own.t().dot(&theta);
    let ridge = state.shard.n_train() as f64 * inv_n * state.lambda_local;
    let mut value = inv_n * squared(&(&fit - &state.shard.train_y)) + ridge * theta.dot(&theta);
    for (nb, th) in state.blocks.neighbors.iter().zip(neighbors) {
        let here = &fit - &nb.theirs_on_mine.t().dot(th);
        let there = nb.mine_on_theirs.t().dot(&theta) - nb.theirs_own.t().dot(th);
        value += penalties.tilde_nei(j) * squared(&here) + penalties.tilde_nei(nb.id) * squared(&there);
    }
    let drift = &fit - &own.t().dot(&anchor);
    value + 2.0 * penalties.tilde_self(j) * squared(&drift)
}

/// Result of checking the per-node monotone-descent condition
/// `c̃_self ≥ |N_j|c̃_nei/2 + λmax(Σ_p c̃_{p,nei}Z_jpZ_jpᵀ) / (2λmin(Z_jjZ_jjᵀ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentCondition {
    pub node: usize,
    /// Smallest admissible `c̃_self`; `None` when `Z_jjZ_jjᵀ` is singular and
    /// no finite value suffices.
    pub required: Option<f64>,
    pub configured: f64,
    pub satisfied: bool,
}

/// Eigenvalues at or below this are treated as zero.
pub const SINGULAR_EIGENVALUE: f64 = 1e-12;

pub fn descent_bound(node: usize, blocks: &NodeBlocks, penalties: &Penalties) -> Option<f64> {
    let first = blocks.neighbors.len() as f64 * penalties.tilde_nei(node) / 2.0;
    let dim = blocks.feature_dim();
    // rank(Z_jj Z_jjᵀ) ≤ N_j
    if dim > blocks.own.ncols() {
        return None;
    }
    if blocks.neighbors.is_empty() {
        return Some(first);
    }
    let mut coupling = Array2::<f64>::zeros((dim, dim));
    for nb in &blocks.neighbors {
        coupling.scaled_add(penalties.tilde_nei(nb.id), &gram(nb.mine_on_theirs.view()));
    }
    let lmax = symmetric_eigenvalues(coupling.view())[dim - 1];
    if lmax <= 0.0 {
        return Some(first);
    }
    let lmin = symmetric_eigenvalues(gram(blocks.own.view()).view())[0];
    if lmin <= SINGULAR_EIGENVALUE {
        return None;
    }
    Some(first + lmax / (2.0 * lmin))
}

pub fn check_descent_condition(states: &[NodeState], penalties: &Penalties) -> Vec<DescentCondition> {
    states
        .iter()
        .map(|st| {
            let required = descent_bound(st.id, &st.blocks, penalties);
            let configured = penalties.tilde_self(st.id);
            DescentCondition {
                node: st.id,
                required,
                configured,
                satisfied: required.is_some_and(|r| configured >= r),
            }
        })
        .collect()
}
