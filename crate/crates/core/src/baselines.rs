//! Comparison methods: a constant-action rollout of the same network engine,
//! grid tuning for that constant, and a proximal-gradient consensus method.
//! All of them report on the metric surface the learned policy uses.

use ndarray::{Array1, Array2};

use crate::engine::{
    init_network, metrics_of_iterates, step_with, ActionTriple, SolveSettings,
};
use crate::error::{Error, Result};
use crate::problems::{LocalObjective, ProblemInstance, ProblemKind};
use crate::prox::{self, soft_threshold};
use crate::rl::DEFAULT_ABORT_THRESHOLD;
use crate::scalar::Scalar;
use crate::topology::{Graph, WeightMatrix};

/// One per-iteration metrics row, shared by every comparison method.
#[derive(Debug, Clone, Copy)]
pub struct MetricRow<S: Scalar> {
    pub iteration: usize,
    pub mse: S,
    pub objective_error: S,
    pub consensus_error: S,
}

/// A full rollout trace. A diverged run keeps the rows gathered up to and
/// including the blow-up.
#[derive(Debug, Clone)]
pub struct AlgorithmRun<S: Scalar> {
    pub rows: Vec<MetricRow<S>>,
    pub final_x: Vec<Array1<S>>,
    pub diverged: bool,
}

/// Runs the network engine for `iterations` steps under one constant action;
/// the hand-tuned stand-in for a learned policy. Stops early and flags
/// divergence when the error passes the abort threshold or a node subproblem
/// stops converging; real failures propagate.
pub fn run_fixed_policy<S: Scalar>(
    inst: &ProblemInstance<S>,
    graph: &Graph,
    action: &ActionTriple<S>,
    iterations: usize,
    settings: &SolveSettings<S>,
) -> Result<AlgorithmRun<S>> {
    inst.require_x_star()?;
    let weights = WeightMatrix::metropolis(graph);
    let mut state = init_network(inst, graph, 0)?;
    let mut rows = Vec::with_capacity(iterations);
    let mut diverged = false;
    for _ in 0..iterations {
        match step_with(&mut state, inst, graph, &weights, action, settings) {
            Ok(_) => {}
            Err(Error::NodeSolve { source, .. })
                if matches!(*source, Error::Nonconverged { .. }) =>
            {
                diverged = true;
                break;
            }
            Err(other) => return Err(other),
        }
        let iterates: Vec<&Array1<S>> = state.nodes().iter().map(|n| &n.x).collect();
        let (mse, objective_error, consensus_error) = metrics_of_iterates(&iterates, inst)?;
        rows.push(MetricRow {
            iteration: state.iteration(),
            mse,
            objective_error,
            consensus_error,
        });
        if !(mse <= S::c(DEFAULT_ABORT_THRESHOLD)) {
            diverged = true;
            break;
        }
    }
    let final_x = state.nodes().iter().map(|n| n.x.clone()).collect();
    Ok(AlgorithmRun {
        rows,
        final_x,
        diverged,
    })
}

/// Picks the grid action with the lowest mean final error over the
/// validation instances. Diverged runs score as infinite; ties keep the
/// lowest grid index.
pub fn tune_fixed_policy<S: Scalar>(
    val_set: &[ProblemInstance<S>],
    graph: &Graph,
    grid: &[ActionTriple<S>],
    iterations: usize,
    settings: &SolveSettings<S>,
) -> Result<ActionTriple<S>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("the tuning grid is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidParameter(
            "the validation set is empty".into(),
        ));
    }
    let mut best_idx = 0usize;
    let mut best_score = S::infinity();
    for (idx, action) in grid.iter().enumerate() {
        let mut total = S::zero();
        for inst in val_set {
            let run = run_fixed_policy(inst, graph, action, iterations, settings)?;
            let final_mse = match run.rows.last() {
                Some(row) if !run.diverged && row.mse.is_finite() => row.mse,
                _ => S::infinity(),
            };
            total = total + final_mse;
        }
        let score = total / S::c(val_set.len() as f64);
        if score < best_score {
            best_score = score;
            best_idx = idx;
        }
    }
    Ok(grid[best_idx])
}

/// `(W·X)_i = Σ_j w_ij x_j` over stacked per-node iterates.
fn mix<S: Scalar>(w: &Array2<S>, xs: &[Array1<S>]) -> Vec<Array1<S>> {
    let d = xs.first().map_or(0, |x| x.len());
    (0..xs.len())
        .map(|i| {
            let mut acc = Array1::<S>::zeros(d);
            for (j, x) in xs.iter().enumerate() {
                let wij = w[[i, j]];
                if wij != S::zero() {
                    acc.scaled_add(wij, x);
                }
            }
            acc
        })
        .collect()
}

fn smooth_grads<S: Scalar>(inst: &ProblemInstance<S>, xs: &[Array1<S>]) -> Vec<Array1<S>> {
    inst.objectives()
        .iter()
        .zip(xs)
        .map(|(obj, x)| {
            if obj.kind().has_smooth_part() {
                obj.smooth_value_grad(x).1
            } else {
                Array1::zeros(x.len())
            }
        })
        .collect()
}

/// Proximal map of the step-scaled local nonsmooth part,
/// `argmin_x ½‖x−v‖² + α·r_i(x)`.
fn prox_step<S: Scalar>(
    obj: &LocalObjective<S>,
    v: &Array1<S>,
    alpha: S,
    settings: &SolveSettings<S>,
) -> Result<Array1<S>> {
    match obj.kind() {
        ProblemKind::Logistic => Ok(v.clone()),
        ProblemKind::LeastSquaresLasso => Ok(soft_threshold(v, alpha * obj.lambda())),
        ProblemKind::L1Lasso => {
            // Divide the objective by α: quadratic weight 1/α, linear −v/α.
            let beta = S::one() / alpha;
            let linear = v.mapv(|t| -t * beta);
            let solved = prox::solve_nonsmooth(
                beta,
                &linear,
                obj,
                settings.tol,
                settings.max_inner,
                None,
            )?;
            Ok(solved.x)
        }
    }
}

/// Proximal-gradient consensus recursion over the mixing matrix `W = I − P`,
/// with the averaged matrix `(I+W)/2` damping the history term:
///
/// ```text
/// x^{3/2}   = W x^1 − α ∇s(x^1)
/// x^{k+3/2} = W x^{k+1} + x^{k+1/2} − ½(I+W) x^k − α(∇s(x^{k+1}) − ∇s(x^k))
/// x^{k+1}   = prox_{α r}(x^{k+1/2})   componentwise per node
/// ```
///
/// Kinds without a nonsmooth part use the identity prox, so the recursion
/// reduces to the plain gradient-tracking form.
pub fn run_pg_extra<S: Scalar>(
    inst: &ProblemInstance<S>,
    graph: &Graph,
    step_size: S,
    iterations: usize,
    settings: &SolveSettings<S>,
) -> Result<AlgorithmRun<S>> {
    inst.require_x_star()?;
    if !step_size.is_finite() || !(step_size > S::zero()) {
        return Err(Error::InvalidParameter(
            "step size must be positive and finite".into(),
        ));
    }
    if graph.node_count() != inst.node_count() {
        return Err(Error::ShapeMismatch(format!(
            "graph has {} nodes, instance has {}",
            graph.node_count(),
            inst.node_count()
        )));
    }
    let weights = WeightMatrix::<S>::metropolis(graph);
    let mixing = weights.mixing();
    let w = mixing.w();
    let n = inst.node_count();
    let d = inst.dimension();
    let alpha = step_size;

    let mut rows = Vec::with_capacity(iterations);
    let mut diverged = false;

    let mut x_prev = vec![Array1::<S>::zeros(d); n];
    let mut grad_prev = smooth_grads(inst, &x_prev);
    let mut wx_prev = mix(w, &x_prev);
    let mut half_prev: Vec<Array1<S>> = (0..n)
        .map(|i| &wx_prev[i] - &(&grad_prev[i] * alpha))
        .collect();
    let mut x_cur = Vec::with_capacity(n);
    for (i, half) in half_prev.iter().enumerate() {
        x_cur.push(prox_step(&inst.objectives()[i], half, alpha, settings)?);
    }

    'outer: for it in 1..=iterations {
        if it > 1 {
            let grad_cur = smooth_grads(inst, &x_cur);
            let wx_cur = mix(w, &x_cur);
            let mut half_next = Vec::with_capacity(n);
            for i in 0..n {
                let tilde = (&x_prev[i] + &wx_prev[i]) * S::c(0.5);
                let diff = (&grad_cur[i] - &grad_prev[i]) * alpha;
                half_next.push(&wx_cur[i] + &half_prev[i] - tilde - diff);
            }
            let mut x_next = Vec::with_capacity(n);
            for (i, half) in half_next.iter().enumerate() {
                match prox_step(&inst.objectives()[i], half, alpha, settings) {
                    Ok(x) => x_next.push(x),
                    Err(Error::Nonconverged { .. }) => {
                        diverged = true;
                        break 'outer;
                    }
                    Err(other) => return Err(other),
                }
            }
            x_prev = std::mem::take(&mut x_cur);
            wx_prev = wx_cur;
            grad_prev = grad_cur;
            half_prev = half_next;
            x_cur = x_next;
        }
        let iterates: Vec<&Array1<S>> = x_cur.iter().collect();
        let (mse, objective_error, consensus_error) = metrics_of_iterates(&iterates, inst)?;
        rows.push(MetricRow {
            iteration: it,
            mse,
            objective_error,
            consensus_error,
        });
        if !(mse <= S::c(DEFAULT_ABORT_THRESHOLD)) {
            diverged = true;
            break;
        }
    }

    Ok(AlgorithmRun {
        rows,
        final_x: x_cur,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::convexity_safeguard;
    use crate::oracle::{grid_minimize_1d, label_instance};
    use crate::problems::{sample_instance, synthetic_pool, Sample};
    use crate::rl::{Env, EnvConfig};
    use ndarray::array;

    fn labeled_instance(
        kind: ProblemKind,
        nodes: usize,
        dim: usize,
        seed: u64,
    ) -> (ProblemInstance<f64>, Graph) {
        let pool = synthetic_pool::<f64>(kind, nodes * 4 + 20, dim, seed);
        let mut inst = sample_instance(
            format!("bl-{}-{seed}", kind.as_str()),
            &pool,
            nodes,
            nodes * 2,
            0.05,
            kind,
            seed ^ 0x517c,
        )
        .unwrap();
        label_instance(&mut inst).unwrap();
        let edges: Vec<(usize, usize)> = (1..nodes).map(|i| (i - 1, i)).collect();
        let graph = Graph::from_edges(nodes, edges).unwrap();
        (inst, graph)
    }

    /// Two nodes averaging scalars: `½(x−b₁)² + ½(x−b₂)²`, optimum at the
    /// arithmetic mean.
    fn averaging_instance(b1: f64, b2: f64) -> (ProblemInstance<f64>, Graph) {
        let objectives = [b1, b2]
            .iter()
            .map(|&b| {
                LocalObjective::new(
                    ProblemKind::LeastSquaresLasso,
                    &[Sample {
                        features: array![1.0],
                        label: b,
                    }],
                    0.0,
                )
                .unwrap()
            })
            .collect();
        let mut inst = ProblemInstance::new("avg", objectives).unwrap();
        inst.set_x_star(array![(b1 + b2) / 2.0]).unwrap();
        (inst, Graph::from_edges(2, vec![(0, 1)]).unwrap())
    }

    #[test]
    fn fixed_policy_traces_are_deterministic() {
        let (inst, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 3, 2, 1);
        let action = ActionTriple::new(1.0, 5.0, 1.0).unwrap();
        let a = run_fixed_policy(&inst, &graph, &action, 20, &SolveSettings::default()).unwrap();
        let b = run_fixed_policy(&inst, &graph, &action, 20, &SolveSettings::default()).unwrap();
        assert_eq!(a.rows.len(), 20);
        for (x, y) in a.rows.iter().zip(b.rows.iter()) {
            assert_eq!(x.mse, y.mse);
            assert_eq!(x.objective_error, y.objective_error);
            assert_eq!(x.consensus_error, y.consensus_error);
        }
        assert_eq!(a.final_x, b.final_x);
    }

    #[test]
    fn a_safe_action_converges_on_a_tiny_instance() {
        let (inst, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 3, 2, 2);
        let weights = WeightMatrix::<f64>::metropolis(&graph);
        let (lambda_max, _) = weights.spectral_bounds().unwrap();
        let action = ActionTriple::new(1.0, 5.0, 1.0).unwrap();
        assert!(convexity_safeguard(&action, 0.0, lambda_max));
        let run =
            run_fixed_policy(&inst, &graph, &action, 5000, &SolveSettings::default()).unwrap();
        assert!(!run.diverged);
        let final_mse = run.rows.last().unwrap().mse;
        assert!(final_mse <= 1e-6, "final mse {final_mse}");
    }

    #[test]
    fn fixed_policy_and_environment_share_the_metric_surface() {
        // The environment's state-forming round plus one policy round under
        // the same constant action is the same engine path as a 2n-iteration
        // constant rollout.
        let (inst, graph) = labeled_instance(ProblemKind::Logistic, 3, 2, 3);
        let action = ActionTriple::new(1.0, 4.0, 1.0).unwrap();
        let n = 5;
        let cfg = EnvConfig {
            rounds_per_episode: 1,
            iterations_per_round: n,
            baseline: action,
            ..EnvConfig::default()
        };
        let mut env = Env::new(&inst, &graph, cfg).unwrap();
        env.reset(0).unwrap();
        let outcome = env.step(&action).unwrap();
        let run =
            run_fixed_policy(&inst, &graph, &action, 2 * n, &SolveSettings::default()).unwrap();
        assert_eq!(outcome.iteration_metrics.len(), n);
        for (env_row, fixed_row) in outcome.iteration_metrics.iter().zip(&run.rows[n..]) {
            assert_eq!(env_row.0, fixed_row.iteration);
            assert_eq!(env_row.1, fixed_row.mse);
            assert_eq!(env_row.2, fixed_row.objective_error);
            assert_eq!(env_row.3, fixed_row.consensus_error);
        }
    }

    #[test]
    fn a_singleton_grid_tunes_to_itself() {
        let (inst, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 3, 2, 4);
        let only = ActionTriple::new(2.0, 3.0, 0.7).unwrap();
        let best = tune_fixed_policy(
            &[inst],
            &graph,
            &[only],
            30,
            &SolveSettings::default(),
        )
        .unwrap();
        assert_eq!(best, only);
    }

    #[test]
    fn tuning_skips_divergent_grid_points() {
        let (inst, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 3, 2, 5);
        let divergent = ActionTriple::new(0.0, 1e-6, 20.0).unwrap();
        let convergent = ActionTriple::new(1.0, 5.0, 1.0).unwrap();
        let run = run_fixed_policy(&inst, &graph, &divergent, 200, &SolveSettings::default())
            .unwrap();
        assert!(run.diverged);
        let best = tune_fixed_policy(
            &[inst],
            &graph,
            &[divergent, convergent],
            200,
            &SolveSettings::default(),
        )
        .unwrap();
        assert_eq!(best, convergent);
    }

    #[test]
    fn ties_keep_the_lowest_grid_index() {
        let (inst, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 3, 2, 6);
        // Both diverge, so both score infinite; the first wins.
        let first = ActionTriple::new(0.0, 1e-6, 20.0).unwrap();
        let second = ActionTriple::new(0.0, 1e-5, 20.0).unwrap();
        let best = tune_fixed_policy(
            &[inst],
            &graph,
            &[first, second],
            120,
            &SolveSettings::default(),
        )
        .unwrap();
        assert_eq!(best, first);
    }

    #[test]
    fn the_consensus_recursion_finds_the_average() {
        let (inst, graph) = averaging_instance(1.0, 5.0);
        let run =
            run_pg_extra(&inst, &graph, 0.3, 2000, &SolveSettings::default()).unwrap();
        assert!(!run.diverged);
        for x in &run.final_x {
            assert!((x[0] - 3.0).abs() <= 1e-6, "iterate {}", x[0]);
        }
        // Tuned small steps drive the iterates into consensus.
        let last = run.rows.last().unwrap();
        assert!(last.consensus_error <= 1e-10, "consensus {}", last.consensus_error);
    }

    #[test]
    fn identity_prox_reduces_to_the_gradient_recursion() {
        let (inst, graph) = labeled_instance(ProblemKind::Logistic, 3, 2, 7);
        let weights = WeightMatrix::<f64>::metropolis(&graph);
        let w = weights.mixing();
        let w = w.w();
        let alpha = 0.4;
        let n = 3;
        // Plain gradient recursion, no prox anywhere.
        let grads = |xs: &[Array1<f64>]| smooth_grads(&inst, xs);
        let mut x_prev = vec![Array1::<f64>::zeros(2); n];
        let mut g_prev = grads(&x_prev);
        let mut wx_prev = mix(w, &x_prev);
        let mut x_cur: Vec<Array1<f64>> = (0..n)
            .map(|i| &wx_prev[i] - &(&g_prev[i] * alpha))
            .collect();
        for steps in 1..=5usize {
            let run = run_pg_extra(&inst, &graph, alpha, steps, &SolveSettings::default())
                .unwrap();
            for i in 0..n {
                let gap = (&run.final_x[i] - &x_cur[i]).mapv(f64::abs).sum();
                assert!(gap <= 1e-12, "step {steps} node {i} gap {gap}");
            }
            let g_cur = grads(&x_cur);
            let wx_cur = mix(w, &x_cur);
            let mut x_next = Vec::with_capacity(n);
            for i in 0..n {
                let tilde = (&x_prev[i] + &wx_prev[i]) * 0.5;
                let diff = (&g_cur[i] - &g_prev[i]) * alpha;
                x_next.push(&wx_cur[i] + &x_cur[i] - tilde - diff);
            }
            x_prev = std::mem::take(&mut x_cur);
            wx_prev = wx_cur;
            g_prev = g_cur;
            x_cur = x_next;
        }
    }

    #[test]
    fn an_oversized_step_is_flagged_as_divergence() {
        let (inst, graph) = averaging_instance(1.0, 5.0);
        // Curvature is 1, so the stable step is O(1); 100× that blows up.
        let run =
            run_pg_extra(&inst, &graph, 100.0, 500, &SolveSettings::default()).unwrap();
        assert!(run.diverged);
        assert!(run.rows.len() < 500);
    }

    #[test]
    fn the_nonsmooth_prox_matches_a_grid_search() {
        // One node, one sample: r(x) = |2x − 3| + 0.5|x|, prox at v = 4 with
        // α = 0.7 found independently by scanning the scalar objective.
        let obj = LocalObjective::<f64>::new(
            ProblemKind::L1Lasso,
            &[Sample {
                features: array![2.0],
                label: 3.0,
            }],
            0.5,
        )
        .unwrap();
        let v = array![4.0];
        let alpha = 0.7;
        let got = prox_step(&obj, &v, alpha, &SolveSettings::default()).unwrap();
        let objective = |x: f64| {
            0.5 * (x - 4.0) * (x - 4.0) + alpha * ((2.0 * x - 3.0).abs() + 0.5 * x.abs())
        };
        let expected = grid_minimize_1d(objective, -10.0, 10.0, 20_000);
        assert!(
            (got[0] - expected).abs() <= 1e-3,
            "prox {} vs grid {expected}",
            got[0]
        );
    }

    #[test]
    fn the_consensus_recursion_handles_the_all_nonsmooth_kind() {
        let (inst, graph) = labeled_instance(ProblemKind::L1Lasso, 2, 1, 8);
        let run =
            run_pg_extra(&inst, &graph, 0.5, 4000, &SolveSettings::default()).unwrap();
        assert!(!run.diverged);
        let first = run.rows.first().unwrap().mse;
        let last = run.rows.last().unwrap().mse;
        assert!(last < first * 1e-2, "mse only moved from {first} to {last}");
        assert!(last <= 1e-4, "final mse {last}");
    }
}
