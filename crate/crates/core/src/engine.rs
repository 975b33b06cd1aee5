//! Distributed solver engine.
//!
//! Runs the parameterized surrogate scheme round by round over a graph: each
//! iteration every node linearizes its smooth term at the current iterate,
//! solves a local regularized quadratic subproblem, exchanges iterates with
//! its neighbours, and accumulates a dual variable that enforces consensus.
//! A round applies one action (the `(α, β, ρ)` triple) for `n` consecutive
//! iterations and collects the per-iteration observations a policy consumes.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::problems::{hessian_eigenvalues, ProblemInstance, ProblemKind};
use crate::prox::{solve_lasso_quadratic, solve_nonsmooth, solve_smooth, QuadraticTerm};
use crate::scalar::Scalar;
use crate::topology::{Graph, WeightMatrix};

/// Action box bounds. ρ is kept strictly positive so the dual update never
/// degenerates, and β strictly positive so every subproblem is strongly
/// convex even when α = 0 or the local Hessian is singular.
pub const ALPHA_MAX: f64 = 20.0;
pub const BETA_MIN: f64 = 1e-6;
pub const BETA_MAX: f64 = 20.0;
pub const RHO_MIN: f64 = 1e-3;
pub const RHO_MAX: f64 = 20.0;

/// Per-round solver parameters `(α, β, ρ)`: curvature scale, proximal weight,
/// and consensus penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionTriple<S: Scalar> {
    alpha: S,
    beta: S,
    rho: S,
}

impl<S: Scalar> ActionTriple<S> {
    /// Validates the box constraints; rejects non-finite values.
    pub fn new(alpha: S, beta: S, rho: S) -> Result<ActionTriple<S>> {
        if !alpha.is_finite() || !beta.is_finite() || !rho.is_finite() {
            return Err(Error::InvalidParameter(
                "action entries must be finite".into(),
            ));
        }
        if alpha < S::zero() || alpha > S::c(ALPHA_MAX) {
            return Err(Error::InvalidParameter(format!(
                "alpha {alpha} outside [0, {ALPHA_MAX}]"
            )));
        }
        if beta < S::c(BETA_MIN) || beta > S::c(BETA_MAX) {
            return Err(Error::InvalidParameter(format!(
                "beta {beta} outside [{BETA_MIN}, {BETA_MAX}]"
            )));
        }
        if rho < S::c(RHO_MIN) || rho > S::c(RHO_MAX) {
            return Err(Error::InvalidParameter(format!(
                "rho {rho} outside [{RHO_MIN}, {RHO_MAX}]"
            )));
        }
        Ok(ActionTriple { alpha, beta, rho })
    }

    /// Clamps arbitrary proposals into the box; NaN collapses to the lower
    /// bound through the IEEE max/min rules.
    pub fn clipped(alpha: S, beta: S, rho: S) -> ActionTriple<S> {
        let clamp = |v: S, lo: f64, hi: f64| v.max(S::c(lo)).min(S::c(hi));
        ActionTriple {
            alpha: clamp(alpha, 0.0, ALPHA_MAX),
            beta: clamp(beta, BETA_MIN, BETA_MAX),
            rho: clamp(rho, RHO_MIN, RHO_MAX),
        }
    }

    /// Mid-box default used for state-forming rollouts and pretraining.
    pub fn baseline() -> ActionTriple<S> {
        ActionTriple {
            alpha: S::c(5.0),
            beta: S::c(5.0),
            rho: S::c(5.0),
        }
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn beta(&self) -> S {
        self.beta
    }

    pub fn rho(&self) -> S {
        self.rho
    }
}

/// One node's primal and dual iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState<S: Scalar> {
    pub x: Array1<S>,
    pub q: Array1<S>,
}

/// Post-update snapshot recorded for one node at one iteration: consensus
/// direction, smooth gradient, and the spectrum of the smooth Hessian. For
/// the kind with no smooth part the last two stay identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTriple<S: Scalar> {
    pub sigma: Array1<S>,
    pub grad: Array1<S>,
    pub eigs: Array1<S>,
}

/// One node's observation block for a round: exactly `n` triples, in
/// iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalObservation<S: Scalar> {
    pub triples: Vec<ObservationTriple<S>>,
}

impl<S: Scalar> LocalObservation<S> {
    /// Flattens the block for policy input: σ always, gradient and spectrum
    /// only for kinds with a smooth term.
    pub fn flattened(&self, kind: ProblemKind) -> Vec<S> {
        let mut out = Vec::new();
        for t in &self.triples {
            out.extend(t.sigma.iter().copied());
            if kind.has_smooth_part() {
                out.extend(t.grad.iter().copied());
                out.extend(t.eigs.iter().copied());
            }
        }
        out
    }
}

/// Subproblem solve settings shared by every node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSettings<S: Scalar> {
    pub tol: S,
    pub max_inner: usize,
}

impl<S: Scalar> Default for SolveSettings<S> {
    fn default() -> Self {
        SolveSettings {
            tol: S::c(1e-10),
            max_inner: 5000,
        }
    }
}

/// The whole network at one iteration.
#[derive(Debug, Clone)]
pub struct NetworkState<S: Scalar> {
    nodes: Vec<NodeState<S>>,
    iteration: usize,
    round: usize,
    // Neumaier compensation carried alongside each q so the dual sum stays
    // conserved to near machine precision over long runs.
    q_comp: Vec<Array1<S>>,
    // Constant smooth Hessians and their spectra, cached per node for the
    // kind whose Hessian does not depend on x.
    cached_hessians: Option<Vec<Array2<S>>>,
    cached_eigs: Option<Vec<Array1<S>>>,
    // Warm starts for the nonsmooth subproblem duals, one per node.
    warm_duals: Vec<Option<Array1<S>>>,
}

impl<S: Scalar> NetworkState<S> {
    pub fn nodes(&self) -> &[NodeState<S>] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeState<S> {
        &self.nodes[i]
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn round(&self) -> usize {
        self.round
    }

    /// ‖Σ_i q_i‖₂, the conservation defect of the dual variables.
    pub fn dual_sum_norm(&self) -> S {
        let d = self.nodes[0].q.len();
        let mut total = Array1::<S>::zeros(d);
        for node in &self.nodes {
            total = total + &node.q;
        }
        total.dot(&total).sqrt()
    }
}

/// Zero-initializes every node; the zero dual satisfies the conservation
/// constraint exactly. The seed is reserved for randomized initialization
/// schemes and does not affect the current deterministic one.
pub fn init_network<S: Scalar>(
    inst: &ProblemInstance<S>,
    graph: &Graph,
    seed: u64,
) -> Result<NetworkState<S>> {
    let _ = seed;
    if inst.node_count() != graph.node_count() {
        return Err(Error::ShapeMismatch(format!(
            "instance has {} nodes but graph has {}",
            inst.node_count(),
            graph.node_count()
        )));
    }
    let n = graph.node_count();
    let d = inst.dimension();
    let nodes = (0..n)
        .map(|_| NodeState {
            x: Array1::zeros(d),
            q: Array1::zeros(d),
        })
        .collect();
    let (cached_hessians, cached_eigs) = if inst.kind() == ProblemKind::LeastSquaresLasso {
        let origin = Array1::<S>::zeros(d);
        let hessians: Vec<Array2<S>> = inst
            .objectives()
            .iter()
            .map(|o| o.smooth_hessian(&origin))
            .collect();
        let eigs = hessians
            .iter()
            .map(|h| hessian_eigenvalues(h).map(Array1::from))
            .collect::<Result<Vec<_>>>()?;
        (Some(hessians), Some(eigs))
    } else {
        (None, None)
    };
    Ok(NetworkState {
        nodes,
        iteration: 0,
        round: 0,
        q_comp: vec![Array1::zeros(d); n],
        cached_hessians,
        cached_eigs,
        warm_duals: vec![None; n],
    })
}

/// σ_i = Σ_{j ∈ N_i} p_ij (x_j − x_i), reading only neighbour iterates.
///
/// The difference form makes each pairwise term exactly antisymmetric in
/// floating point, which keeps Σ_i σ_i near zero; a compensated sum removes
/// the per-node accumulation error on top of that.
pub fn local_consensus<S: Scalar>(
    state: &NetworkState<S>,
    graph: &Graph,
    weights: &WeightMatrix<S>,
    i: usize,
) -> Array1<S> {
    let d = state.nodes[i].x.len();
    let x_i = &state.nodes[i].x;
    let p = weights.p();
    let mut sum = Array1::<S>::zeros(d);
    let mut comp = Array1::<S>::zeros(d);
    for &j in graph.neighbors(i) {
        let w = p[[i, j]];
        for k in 0..d {
            let term = w * (state.nodes[j].x[k] - x_i[k]);
            neumaier_add(&mut sum[k], &mut comp[k], term);
        }
    }
    sum + comp
}

fn neumaier_add<S: Scalar>(sum: &mut S, comp: &mut S, term: S) {
    let t = *sum + term;
    if sum.abs() >= term.abs() {
        *comp = *comp + ((*sum - t) + term);
    } else {
        *comp = *comp + ((term - t) + *sum);
    }
    *sum = t;
}

/// Advisory check that the penalized surrogate stays convex:
/// `α·λ_min(∇²s) + β ≥ ρ·λ_max(P)`. Never blocks an action.
pub fn convexity_safeguard<S: Scalar>(
    a: &ActionTriple<S>,
    hessian_eig_min: S,
    lambda_max_p: S,
) -> bool {
    a.alpha * hessian_eig_min + a.beta >= a.rho * lambda_max_p
}

/// Advances every node by one iteration under the given action and returns
/// the per-node observation triples recorded after the update.
pub fn step<S: Scalar>(
    state: &mut NetworkState<S>,
    inst: &ProblemInstance<S>,
    graph: &Graph,
    weights: &WeightMatrix<S>,
    action: &ActionTriple<S>,
) -> Result<Vec<ObservationTriple<S>>> {
    step_with(state, inst, graph, weights, action, &SolveSettings::default())
}

pub fn step_with<S: Scalar>(
    state: &mut NetworkState<S>,
    inst: &ProblemInstance<S>,
    graph: &Graph,
    weights: &WeightMatrix<S>,
    action: &ActionTriple<S>,
    settings: &SolveSettings<S>,
) -> Result<Vec<ObservationTriple<S>>> {
    let n = state.nodes.len();
    let d = inst.dimension();
    if inst.node_count() != n || graph.node_count() != n {
        return Err(Error::ShapeMismatch(
            "instance, graph, and network disagree on node count".into(),
        ));
    }
    let (alpha, beta, rho) = (action.alpha, action.beta, action.rho);

    // Phase 1: every node forms its subproblem from the shared iterate
    // snapshot and solves for x^{k+1}.
    let mut new_x: Vec<Array1<S>> = Vec::with_capacity(n);
    for i in 0..n {
        let obj = inst.objective(i);
        let node = &state.nodes[i];
        let sigma = local_consensus(state, graph, weights, i);
        let (grad, curvature) = match inst.kind() {
            ProblemKind::L1Lasso => (Array1::zeros(d), None),
            _ => {
                let (_, g) = obj.smooth_value_grad(&node.x);
                let h = match &state.cached_hessians {
                    Some(cache) => cache[i].clone(),
                    None => obj.smooth_hessian(&node.x),
                };
                (g, Some(h))
            }
        };
        // c_i = q_i − (α∇²s_i + βI)x_i + ∇s_i(x_i) + ρσ_i
        let mut linear = &node.q + &grad + &(&sigma * rho);
        let x_next = match curvature {
            Some(h) => {
                let mut m = h * alpha;
                for k in 0..d {
                    m[[k, k]] = m[[k, k]] + beta;
                }
                linear = linear - m.dot(&node.x);
                let term = QuadraticTerm {
                    m,
                    linear: linear.clone(),
                };
                let solved = if inst.kind() == ProblemKind::LeastSquaresLasso {
                    solve_lasso_quadratic(
                        &term,
                        obj.lambda(),
                        settings.tol,
                        settings.max_inner,
                        Some(&node.x),
                    )
                } else {
                    solve_smooth(&term)
                };
                solved.map_err(|e| e.at_node(i))?.x
            }
            None => {
                linear.scaled_add(-beta, &node.x);
                let solved = solve_nonsmooth(
                    beta,
                    &linear,
                    obj,
                    settings.tol,
                    settings.max_inner,
                    state.warm_duals[i].as_ref(),
                )
                .map_err(|e| e.at_node(i))?;
                state.warm_duals[i] = solved.dual.clone();
                solved.x
            }
        };
        new_x.push(x_next);
    }
    for (node, x) in state.nodes.iter_mut().zip(new_x) {
        node.x = x;
    }

    // Phase 2: consensus exchange on the updated iterates, dual update, and
    // observation capture.
    let sigmas: Vec<Array1<S>> = (0..n)
        .map(|i| local_consensus(state, graph, weights, i))
        .collect();
    let mut observations = Vec::with_capacity(n);
    for i in 0..n {
        for k in 0..d {
            let q = &mut state.nodes[i].q;
            neumaier_add(&mut q[k], &mut state.q_comp[i][k], rho * sigmas[i][k]);
        }
        let (grad, eigs) = match inst.kind() {
            ProblemKind::L1Lasso => (Array1::zeros(d), Array1::zeros(d)),
            _ => {
                let obj = inst.objective(i);
                let (_, g) = obj.smooth_value_grad(&state.nodes[i].x);
                let e = match &state.cached_eigs {
                    Some(cache) => cache[i].clone(),
                    None => Array1::from(
                        hessian_eigenvalues(&obj.smooth_hessian(&state.nodes[i].x))
                            .map_err(|err| err.at_node(i))?,
                    ),
                };
                (g, e)
            }
        };
        observations.push(ObservationTriple {
            sigma: sigmas[i].clone(),
            grad,
            eigs,
        });
    }
    state.iteration += 1;
    Ok(observations)
}

/// Applies `step` n times under one action and returns the round's
/// observation block, one entry per node with exactly n triples each.
pub fn run_round<S: Scalar>(
    state: &mut NetworkState<S>,
    inst: &ProblemInstance<S>,
    graph: &Graph,
    weights: &WeightMatrix<S>,
    action: &ActionTriple<S>,
    n: usize,
) -> Result<Vec<LocalObservation<S>>> {
    run_round_with(
        state,
        inst,
        graph,
        weights,
        action,
        n,
        &SolveSettings::default(),
        |_| {},
    )
}

/// `run_round` with explicit solver settings and a per-iteration callback
/// (invoked after each step with the updated state).
#[allow(clippy::too_many_arguments)]
pub fn run_round_with<S: Scalar>(
    state: &mut NetworkState<S>,
    inst: &ProblemInstance<S>,
    graph: &Graph,
    weights: &WeightMatrix<S>,
    action: &ActionTriple<S>,
    n: usize,
    settings: &SolveSettings<S>,
    mut on_iteration: impl FnMut(&NetworkState<S>),
) -> Result<Vec<LocalObservation<S>>> {
    if n == 0 {
        return Err(Error::InvalidParameter(
            "a round must contain at least one iteration".into(),
        ));
    }
    let node_count = state.nodes.len();
    let mut blocks: Vec<LocalObservation<S>> = (0..node_count)
        .map(|_| LocalObservation {
            triples: Vec::with_capacity(n),
        })
        .collect();
    for _ in 0..n {
        let triples = step_with(state, inst, graph, weights, action, settings)?;
        for (block, t) in blocks.iter_mut().zip(triples) {
            block.triples.push(t);
        }
        on_iteration(state);
    }
    state.round += 1;
    Ok(blocks)
}

/// Round-level metrics against the labeled optimum: mean squared iterate
/// error, objective gap, and consensus spread.
pub fn metrics<S: Scalar>(
    state: &NetworkState<S>,
    inst: &ProblemInstance<S>,
) -> Result<(S, S, S)> {
    let iterates: Vec<&Array1<S>> = state.nodes.iter().map(|n| &n.x).collect();
    metrics_of_iterates(&iterates, inst)
}

/// Same metric triple for any stacked iterate, so comparison methods that
/// do not run through [`NetworkState`] report on the identical surface.
pub fn metrics_of_iterates<S: Scalar>(
    iterates: &[&Array1<S>],
    inst: &ProblemInstance<S>,
) -> Result<(S, S, S)> {
    let x_star = inst.require_x_star()?;
    let n = iterates.len();
    if n != inst.node_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} iterates for {} nodes",
            n,
            inst.node_count()
        )));
    }
    let d = inst.dimension();
    let inv_n = S::one() / S::c(n as f64);

    let mut mse = S::zero();
    for x in iterates {
        let diff = *x - x_star;
        mse = mse + diff.dot(&diff);
    }
    mse = mse * inv_n;

    let mut value = S::zero();
    let mut value_star = S::zero();
    for (x, obj) in iterates.iter().zip(inst.objectives()) {
        value = value + obj.value(x);
        value_star = value_star + obj.value(x_star);
    }
    let objective_error = (value - value_star).abs();

    let mut mean = Array1::<S>::zeros(d);
    for x in iterates {
        mean = mean + *x;
    }
    mean = mean * inv_n;
    let mut consensus_error = S::zero();
    for x in iterates {
        let diff = *x - &mean;
        consensus_error = consensus_error + diff.dot(&diff);
    }

    Ok((mse, objective_error, consensus_error))
}

/// Smallest smooth-Hessian eigenvalue over all nodes at their current
/// iterates; the conservative curvature input to the safeguard.
pub fn min_hessian_eigenvalue<S: Scalar>(
    state: &NetworkState<S>,
    inst: &ProblemInstance<S>,
) -> Result<S> {
    if inst.kind() == ProblemKind::L1Lasso {
        return Ok(S::zero());
    }
    if let Some(cache) = &state.cached_eigs {
        return Ok(cache
            .iter()
            .map(|e| e[0])
            .fold(S::infinity(), |a, b| a.min(b)));
    }
    let mut smallest = S::infinity();
    for (node, obj) in state.nodes.iter().zip(inst.objectives()) {
        let eigs = hessian_eigenvalues(&obj.smooth_hessian(&node.x))?;
        smallest = smallest.min(eigs[0]);
    }
    Ok(smallest)
}
