//! Decision process around the network engine plus the policy-gradient
//! trainer.
//!
//! One environment step runs a full communication round (`n` engine
//! iterations) under a single action triple broadcast to every node. States
//! aggregate the per-node observation blocks, rewards accumulate the
//! per-iteration mean squared error against the labeled optimum, and
//! episodes end after a fixed number of rounds or when the error diverges.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    init_network, metrics, run_round_with, ActionTriple, LocalObservation, NetworkState,
    SolveSettings,
};
use crate::error::{Error, Result};
use crate::nn::{
    adam_step, Adam, Checkpoint, CheckpointMeta, GaussianPolicy, Mlp, Normalizer,
};
use crate::problems::{ProblemInstance, ProblemKind};
use crate::scalar::Scalar;
use crate::topology::{Graph, WeightMatrix};

/// Default episode length in communication rounds.
pub const DEFAULT_ROUNDS_PER_EPISODE: usize = 10;
/// Default engine iterations per round.
pub const DEFAULT_ITERATIONS_PER_ROUND: usize = 10;
/// Mean squared error beyond which an episode counts as diverged.
pub const DEFAULT_ABORT_THRESHOLD: f64 = 1e6;
/// Terminal reward of a diverged episode.
pub const DEFAULT_ABORT_PENALTY: f64 = -100.0;
/// Ridge coefficient of the cloning stage, applied decoupled per epoch as a
/// weight scale of `1 − lr · CLONE_WEIGHT_DECAY`.
pub const CLONE_WEIGHT_DECAY: f64 = 1.0;

/// How per-iteration errors turn into a round reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardShaping {
    /// Negative sum of per-iteration mean squared errors.
    Raw,
    /// Negative sum of `log10(1 + mse·1e6)`, divided by the iteration count;
    /// compresses the many orders of magnitude an episode spans.
    #[default]
    Log,
}

/// Folds the per-iteration errors of one round into a reward. Zero iff every
/// iterate sat exactly on the optimum; negative otherwise.
pub fn shaped_reward<S: Scalar>(shaping: RewardShaping, mses: &[S]) -> S {
    match shaping {
        RewardShaping::Raw => -mses.iter().fold(S::zero(), |a, &m| a + m),
        RewardShaping::Log => {
            if mses.is_empty() {
                return S::zero();
            }
            let scale = S::c(mses.len() as f64);
            let total = mses.iter().fold(S::zero(), |a, &m| {
                a + (S::one() + m * S::c(1e6)).log10()
            });
            -total / scale
        }
    }
}

/// Environment shape and termination settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig<S: Scalar> {
    pub rounds_per_episode: usize,
    pub iterations_per_round: usize,
    pub baseline: ActionTriple<S>,
    pub abort_threshold: S,
    pub abort_penalty: S,
    pub shaping: RewardShaping,
    pub solve: SolveSettings<S>,
}

impl<S: Scalar> Default for EnvConfig<S> {
    fn default() -> Self {
        EnvConfig {
            rounds_per_episode: DEFAULT_ROUNDS_PER_EPISODE,
            iterations_per_round: DEFAULT_ITERATIONS_PER_ROUND,
            baseline: ActionTriple::baseline(),
            abort_threshold: S::c(DEFAULT_ABORT_THRESHOLD),
            abort_penalty: S::c(DEFAULT_ABORT_PENALTY),
            shaping: RewardShaping::default(),
            solve: SolveSettings::default(),
        }
    }
}

impl<S: Scalar> EnvConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.rounds_per_episode == 0 || self.iterations_per_round == 0 {
            return Err(Error::InvalidParameter(
                "episode needs at least one round of at least one iteration".into(),
            ));
        }
        if !(self.abort_threshold > S::zero()) {
            return Err(Error::InvalidParameter(
                "abort threshold must be positive".into(),
            ));
        }
        if !self.abort_penalty.is_finite() || self.abort_penalty > S::zero() {
            return Err(Error::InvalidParameter(
                "abort penalty must be finite and nonpositive".into(),
            ));
        }
        Ok(())
    }
}

/// Action-vector width the policy emits for a kind: the all-nonsmooth kind
/// has no curvature term, so its action drops the first coordinate.
pub fn action_dim(kind: ProblemKind) -> usize {
    if kind.has_smooth_part() {
        3
    } else {
        2
    }
}

/// The baseline action as a policy-space vector.
pub fn baseline_vector<S: Scalar>(kind: ProblemKind, baseline: &ActionTriple<S>) -> Array1<S> {
    if kind.has_smooth_part() {
        Array1::from(vec![baseline.alpha(), baseline.beta(), baseline.rho()])
    } else {
        Array1::from(vec![baseline.beta(), baseline.rho()])
    }
}

/// Maps an unconstrained policy output into the action box.
pub fn action_from_vector<S: Scalar>(kind: ProblemKind, v: &Array1<S>) -> ActionTriple<S> {
    if kind.has_smooth_part() {
        ActionTriple::clipped(v[0], v[1], v[2])
    } else {
        ActionTriple::clipped(S::zero(), v[0], v[1])
    }
}

/// `sign(z)·log(1+|z|)`: odd, monotone, identity-sloped at zero.
fn compress<S: Scalar>(z: S) -> S {
    z.signum() * (S::one() + z.abs()).ln()
}

/// One environment over one labeled instance. Owns the network state;
/// callers drive it through [`Env::reset`] and [`Env::step`].
pub struct Env<'a, S: Scalar> {
    inst: &'a ProblemInstance<S>,
    graph: &'a Graph,
    weights: WeightMatrix<S>,
    cfg: EnvConfig<S>,
    state: Option<NetworkState<S>>,
    rounds_taken: usize,
    aborted: bool,
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome<S: Scalar> {
    pub state: Array1<S>,
    pub reward: S,
    pub done: bool,
    pub aborted: bool,
    /// `(iteration, mse, objective_error, consensus_error)` after each of
    /// the round's engine iterations; empty when the round failed outright.
    pub iteration_metrics: Vec<(usize, S, S, S)>,
}

impl<'a, S: Scalar> Env<'a, S> {
    pub fn new(
        inst: &'a ProblemInstance<S>,
        graph: &'a Graph,
        cfg: EnvConfig<S>,
    ) -> Result<Env<'a, S>> {
        cfg.validate()?;
        inst.require_x_star()?;
        if graph.node_count() != inst.node_count() {
            return Err(Error::ShapeMismatch(format!(
                "graph has {} nodes, instance has {}",
                graph.node_count(),
                inst.node_count()
            )));
        }
        let weights = WeightMatrix::metropolis(graph);
        Ok(Env {
            inst,
            graph,
            weights,
            cfg,
            state: None,
            rounds_taken: 0,
            aborted: false,
        })
    }

    pub fn config(&self) -> &EnvConfig<S> {
        &self.cfg
    }

    /// Flattened state width: every node contributes `n` observation blocks
    /// of `3d` (smooth kinds) or `d` (all-nonsmooth) values.
    pub fn state_dim(&self) -> usize {
        let per_triple = if self.inst.kind().has_smooth_part() {
            3 * self.inst.dimension()
        } else {
            self.inst.dimension()
        };
        self.inst.node_count() * self.cfg.iterations_per_round * per_triple
    }

    pub fn action_dim(&self) -> usize {
        action_dim(self.inst.kind())
    }

    /// The network after the most recent round, if any.
    pub fn network(&self) -> Option<&NetworkState<S>> {
        self.state.as_ref()
    }

    fn assemble_state(&self, blocks: &[LocalObservation<S>]) -> Array1<S> {
        let smooth = self.inst.kind().has_smooth_part();
        let mut out = Vec::with_capacity(self.state_dim());
        for block in blocks {
            for t in &block.triples {
                out.extend(t.sigma.iter().map(|&v| compress(v)));
                if smooth {
                    out.extend(t.grad.iter().map(|&v| compress(v)));
                    out.extend(t.eigs.iter().copied());
                }
            }
        }
        Array1::from(out)
    }

    /// Re-initializes the network and runs the state-forming round under the
    /// baseline action. Errors here are real failures, not divergence.
    pub fn reset(&mut self, seed: u64) -> Result<Array1<S>> {
        let mut state = init_network(self.inst, self.graph, seed)?;
        let blocks = run_round_with(
            &mut state,
            self.inst,
            self.graph,
            &self.weights,
            &self.cfg.baseline,
            self.cfg.iterations_per_round,
            &self.cfg.solve,
            |_| {},
        )?;
        self.state = Some(state);
        self.rounds_taken = 0;
        self.aborted = false;
        Ok(self.assemble_state(&blocks))
    }

    /// Runs one round under `action`. `done` turns true at the episode
    /// horizon but stepping further is allowed (evaluation uses longer
    /// horizons); a diverged or failed round is terminal for good.
    pub fn step(&mut self, action: &ActionTriple<S>) -> Result<StepOutcome<S>> {
        if self.aborted {
            return Err(Error::InvalidParameter(
                "episode aborted; reset the environment first".into(),
            ));
        }
        let state = self.state.as_mut().ok_or_else(|| {
            Error::InvalidParameter("environment not reset".into())
        })?;
        let inst = self.inst;
        let mut rows = Vec::with_capacity(self.cfg.iterations_per_round);
        let round_result = run_round_with(
            state,
            inst,
            self.graph,
            &self.weights,
            action,
            self.cfg.iterations_per_round,
            &self.cfg.solve,
            |s| {
                if let Ok((mse, obj, cons)) = metrics(s, inst) {
                    rows.push((s.iteration(), mse, obj, cons));
                }
            },
        );
        match round_result {
            Ok(blocks) => {
                self.rounds_taken += 1;
                let mses: Vec<S> = rows.iter().map(|r| r.1).collect();
                let diverged = mses
                    .iter()
                    .any(|&m| !(m <= self.cfg.abort_threshold));
                let mut reward = shaped_reward(self.cfg.shaping, &mses);
                if diverged {
                    reward = reward + self.cfg.abort_penalty;
                    self.aborted = true;
                }
                Ok(StepOutcome {
                    state: self.assemble_state(&blocks),
                    reward,
                    done: diverged || self.rounds_taken >= self.cfg.rounds_per_episode,
                    aborted: diverged,
                    iteration_metrics: rows,
                })
            }
            // A subproblem that cannot meet its tolerance is the footprint
            // of a diverging action sequence: terminal penalty, not a crash.
            Err(Error::NodeSolve { source, .. })
                if matches!(*source, Error::Nonconverged { .. }) =>
            {
                self.aborted = true;
                Ok(StepOutcome {
                    state: Array1::zeros(self.state_dim()),
                    reward: self.cfg.abort_penalty,
                    done: true,
                    aborted: true,
                    iteration_metrics: rows,
                })
            }
            Err(other) => Err(other),
        }
    }

    /// Metrics of the current iterate.
    pub fn current_metrics(&self) -> Result<(S, S, S)> {
        let state = self.state.as_ref().ok_or_else(|| {
            Error::InvalidParameter("environment not reset".into())
        })?;
        metrics(state, self.inst)
    }
}

/// One step of experience as the policy saw it.
#[derive(Debug, Clone)]
pub struct Transition<S: Scalar> {
    /// Normalized state fed to the policy.
    pub state: Array1<S>,
    /// Raw (pre-clip) action sample in policy space.
    pub action: Array1<S>,
    pub reward: S,
    pub log_prob: S,
    pub value: S,
    pub done: bool,
}

/// Experience with its advantage estimates.
#[derive(Debug, Clone)]
pub struct RolloutBatch<S: Scalar> {
    pub transitions: Vec<Transition<S>>,
    pub advantages: Array1<S>,
    pub returns: Array1<S>,
}

impl<S: Scalar> RolloutBatch<S> {
    /// λ-weighted temporal-difference advantages with reset at episode ends;
    /// returns are advantages plus value estimates.
    pub fn compute_advantages(
        transitions: Vec<Transition<S>>,
        gamma: S,
        gae_lambda: S,
    ) -> RolloutBatch<S> {
        let len = transitions.len();
        let mut advantages = Array1::<S>::zeros(len);
        let mut carry = S::zero();
        for t in (0..len).rev() {
            let tr = &transitions[t];
            let (next_value, next_carry) = if tr.done || t + 1 == len {
                (S::zero(), S::zero())
            } else {
                (transitions[t + 1].value, carry)
            };
            let delta = tr.reward + gamma * next_value - tr.value;
            carry = delta + gamma * gae_lambda * next_carry;
            advantages[t] = carry;
        }
        let returns = Array1::from_shape_fn(len, |t| advantages[t] + transitions[t].value);
        RolloutBatch {
            transitions,
            advantages,
            returns,
        }
    }

    /// Batch advantages shifted and scaled to zero mean, unit variance.
    pub fn normalized_advantages(&self) -> Array1<S> {
        let len = self.advantages.len();
        if len == 0 {
            return self.advantages.clone();
        }
        let inv = S::one() / S::c(len as f64);
        let mean = self.advantages.sum() * inv;
        let var = self
            .advantages
            .iter()
            .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv;
        let scale = S::one() / (var.sqrt() + S::c(1e-8));
        self.advantages.mapv(|v| (v - mean) * scale)
    }
}

/// Trainer hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig<S: Scalar> {
    pub gamma: S,
    pub gae_lambda: S,
    pub clip_eps: S,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: S,
    /// Critic step size. Returns sit tens of reward units from a fresh
    /// network's output, so the critic needs a faster schedule than the
    /// cautiously-stepped actor to become a useful baseline at all.
    pub value_lr: S,
    pub entropy_coef: S,
    pub value_coef: S,
}

impl<S: Scalar> Default for PpoConfig<S> {
    fn default() -> Self {
        PpoConfig {
            gamma: S::c(0.99),
            gae_lambda: S::c(0.95),
            clip_eps: S::c(0.2),
            epochs: 4,
            minibatch: 64,
            lr: S::c(3e-4),
            value_lr: S::c(1e-2),
            entropy_coef: S::zero(),
            value_coef: S::c(0.5),
        }
    }
}

/// `min(ratio·A, clip(ratio, 1−ε, 1+ε)·A)`: the clipped surrogate term.
pub fn clipped_surrogate<S: Scalar>(ratio: S, advantage: S, clip_eps: S) -> S {
    let clipped = ratio.max(S::one() - clip_eps).min(S::one() + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Aggregates reported by one policy update.
#[derive(Debug, Clone, Copy)]
pub struct PpoStats<S: Scalar> {
    /// `max_t |r_t − 1|` over the whole batch before any gradient step.
    pub pre_update_ratio_gap: S,
    pub mean_ratio: S,
    pub clip_fraction: S,
    pub policy_loss: S,
    pub value_loss: S,
    pub entropy: S,
}

/// Several epochs of minibatched clipped-surrogate ascent plus value-function
/// regression. A non-finite loss restores both networks and both optimizer
/// states and reports the failure.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<S: Scalar>(
    policy: &mut GaussianPolicy<S>,
    value: &mut Mlp<S>,
    batch: &RolloutBatch<S>,
    cfg: &PpoConfig<S>,
    opt_policy: &mut Adam<S>,
    opt_value: &mut Adam<S>,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats<S>> {
    if batch.transitions.is_empty() {
        return Err(Error::InvalidParameter("empty rollout batch".into()));
    }
    let snapshot_policy = policy.clone();
    let snapshot_value = value.clone();
    let snapshot_opt_policy = opt_policy.clone();
    let snapshot_opt_value = opt_value.clone();

    let advantages = batch.normalized_advantages();
    let len = batch.transitions.len();

    let mut pre_gap = S::zero();
    for tr in &batch.transitions {
        let lp = policy.log_prob(&tr.state, &tr.action)?;
        let ratio = (lp - tr.log_prob).exp();
        pre_gap = pre_gap.max((ratio - S::one()).abs());
    }

    let mut ratio_sum = S::zero();
    let mut ratio_count = 0usize;
    let mut clip_events = 0usize;
    let mut policy_loss_sum = S::zero();
    let mut value_loss_sum = S::zero();
    let mut minibatches = 0usize;

    let mut indices: Vec<usize> = (0..len).collect();
    let minibatch = cfg.minibatch.max(1);
    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(minibatch) {
            let inv = S::one() / S::c(chunk.len() as f64);
            let mut pgrads = policy.zero_grads();
            let mut vgrads = value.zero_grads();
            let mut policy_loss = S::zero();
            let mut value_loss = S::zero();
            for &t in chunk {
                let tr = &batch.transitions[t];
                let adv = advantages[t];
                let (mean, cache) = policy.mean_cached(&tr.state)?;
                let lp =
                    crate::nn::gaussian_log_prob(&mean, policy.log_std(), &tr.action);
                let ratio = (lp - tr.log_prob).exp();
                let surrogate = clipped_surrogate(ratio, adv, cfg.clip_eps);
                policy_loss = policy_loss - surrogate * inv;
                ratio_sum = ratio_sum + ratio;
                ratio_count += 1;
                if (ratio - S::one()).abs() > cfg.clip_eps {
                    clip_events += 1;
                }
                // The clipped branch is constant in the parameters, so the
                // gradient only flows where the raw surrogate is active.
                if ratio * adv <= surrogate + S::c(1e-300) {
                    policy.accumulate_log_prob_grad(
                        &cache,
                        &mean,
                        &tr.action,
                        -adv * ratio * inv,
                        &mut pgrads,
                    );
                }
                let (v_out, v_cache) = value.forward_cached(&tr.state)?;
                let err = v_out[0] - batch.returns[t];
                value_loss = value_loss + err * err * inv;
                let dout = Array1::from(vec![cfg.value_coef * S::c(2.0) * err * inv]);
                value.backward(&v_cache, &dout, &mut vgrads);
            }
            let entropy = policy.entropy();
            policy_loss = policy_loss - cfg.entropy_coef * entropy;
            for g in pgrads.log_std.iter_mut() {
                *g = *g - cfg.entropy_coef;
            }
            if !policy_loss.is_finite() || !value_loss.is_finite() {
                *policy = snapshot_policy;
                *value = snapshot_value;
                *opt_policy = snapshot_opt_policy;
                *opt_value = snapshot_opt_value;
                return Err(Error::Nonconverged {
                    context: "policy update hit a non-finite loss; parameters restored"
                        .into(),
                    residual: f64::NAN,
                    iterations: minibatches,
                    best: Vec::new(),
                });
            }
            policy_loss_sum = policy_loss_sum + policy_loss;
            value_loss_sum = value_loss_sum + value_loss;
            minibatches += 1;

            let mut pflat = policy.to_flat();
            adam_step(
                &mut pflat,
                &pgrads.to_flat(),
                opt_policy,
                cfg.lr,
                (S::c(0.9), S::c(0.999)),
                S::c(1e-8),
            )?;
            policy.set_flat(&pflat)?;
            let mut vflat = value.to_flat();
            adam_step(
                &mut vflat,
                &vgrads.to_flat(),
                opt_value,
                cfg.value_lr,
                (S::c(0.9), S::c(0.999)),
                S::c(1e-8),
            )?;
            value.set_flat(&vflat)?;
        }
    }

    let inv_mb = S::one() / S::c(minibatches.max(1) as f64);
    Ok(PpoStats {
        pre_update_ratio_gap: pre_gap,
        mean_ratio: ratio_sum / S::c(ratio_count.max(1) as f64),
        clip_fraction: S::c(clip_events as f64) / S::c(ratio_count.max(1) as f64),
        policy_loss: policy_loss_sum * inv_mb,
        value_loss: value_loss_sum * inv_mb,
        entropy: policy.entropy(),
    })
}

/// Outcome of the supervised pretraining stage.
#[derive(Debug, Clone, Copy)]
pub struct CloneReport<S: Scalar> {
    pub final_loss: S,
    /// Advisory flag; a loose fit is reported, never fatal.
    pub converged: bool,
}

/// Regresses the policy mean toward a constant target over sample states.
/// Leaves the exploration spread untouched.
pub fn pretrain_behavior_clone<S: Scalar>(
    policy: &mut GaussianPolicy<S>,
    states: &[Array1<S>],
    target: &Array1<S>,
    epochs: usize,
    lr: S,
    opt: &mut Adam<S>,
) -> Result<CloneReport<S>> {
    if states.is_empty() {
        return Err(Error::InvalidParameter(
            "behavior cloning needs at least one sample state".into(),
        ));
    }
    if target.len() != policy.action_dim() {
        return Err(Error::ShapeMismatch(format!(
            "clone target length {} vs action dimension {}",
            target.len(),
            policy.action_dim()
        )));
    }
    let inv = S::one() / S::c(states.len() as f64);
    let mut loss = S::zero();
    for _ in 0..epochs {
        let mut grads = policy.zero_grads();
        loss = S::zero();
        for s in states {
            let (mean, cache) = policy.mean_cached(s)?;
            let err = &mean - target;
            loss = loss + err.dot(&err) * S::c(0.5) * inv;
            policy
                .mean_net()
                .backward(&cache, &(err * inv), &mut grads.mean);
        }
        let mut flat = policy.to_flat();
        adam_step(
            &mut flat,
            &grads.to_flat(),
            opt,
            lr,
            (S::c(0.9), S::c(0.999)),
            S::c(1e-8),
        )?;
        policy.set_flat(&flat)?;
        // Ridge term, decoupled. The target is one constant vector, so the
        // regularized optimum is the constant network (zero weights, output
        // bias at the target), which keeps held-out states from steering the
        // pretrained mean anywhere the sample cloud never covered.
        policy.decay_mean_weights(S::one() - lr * S::c(CLONE_WEIGHT_DECAY));
    }
    if epochs == 0 {
        for s in states {
            let mean = policy.mean(s)?;
            let err = &mean - target;
            loss = loss + err.dot(&err) * S::c(0.5) * inv;
        }
    }
    Ok(CloneReport {
        final_loss: loss,
        converged: loss <= S::c(0.01),
    })
}

/// Full training-run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<S: Scalar> {
    pub env: EnvConfig<S>,
    pub ppo: PpoConfig<S>,
    pub updates: usize,
    pub episodes_per_update: usize,
    pub eval_interval: usize,
    pub pretrain_states: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: S,
    pub hidden: usize,
    pub initial_log_std: S,
    pub seed: u64,
}

impl<S: Scalar> Default for TrainConfig<S> {
    fn default() -> Self {
        TrainConfig {
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            updates: 50,
            episodes_per_update: 8,
            eval_interval: 1,
            pretrain_states: 256,
            pretrain_epochs: 1500,
            pretrain_lr: S::c(1e-2),
            hidden: crate::nn::DEFAULT_HIDDEN,
            initial_log_std: S::zero(),
            seed: 0,
        }
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint<S: Scalar> {
    pub update_idx: usize,
    pub mean_return: S,
    pub val_mse: S,
    pub clip_frac: S,
    pub policy_loss: S,
    pub value_loss: S,
}

/// Result of a training run: the validation-best checkpoint plus curves.
#[derive(Debug, Clone)]
pub struct TrainOutput<S: Scalar> {
    pub checkpoint: Checkpoint<S>,
    pub curves: Vec<CurvePoint<S>>,
    pub pretrain_loss: S,
    pub best_val_mse: S,
    pub best_update_idx: usize,
}

fn check_instance_set<S: Scalar>(
    set: &[ProblemInstance<S>],
    graph: &Graph,
    what: &str,
) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidParameter(format!("{what} set is empty")));
    }
    let kind = set[0].kind();
    let dim = set[0].dimension();
    for inst in set {
        if inst.kind() != kind || inst.dimension() != dim {
            return Err(Error::InvalidParameter(format!(
                "{what} set mixes problem kinds or dimensions"
            )));
        }
        if inst.node_count() != graph.node_count() {
            return Err(Error::ShapeMismatch(format!(
                "{what} instance {} has {} nodes, graph has {}",
                inst.instance_id(),
                inst.node_count(),
                graph.node_count()
            )));
        }
        inst.require_x_star()?;
    }
    Ok(())
}

/// Mean final-round error of the deterministic (mean-action) policy over a
/// set of instances. Diverged or failed rollouts count as infinite.
pub fn validate_policy<S: Scalar>(
    policy: &GaussianPolicy<S>,
    normalizer: &Normalizer<S>,
    instances: &[ProblemInstance<S>],
    graph: &Graph,
    env_cfg: &EnvConfig<S>,
) -> Result<S> {
    let mut total = S::zero();
    for (idx, inst) in instances.iter().enumerate() {
        let kind = inst.kind();
        let mut env = Env::new(inst, graph, env_cfg.clone())?;
        let mut raw = env.reset(idx as u64)?;
        let mut final_mse = S::infinity();
        for _ in 0..env_cfg.rounds_per_episode {
            let state = normalizer.normalize(&raw)?;
            let mean = policy.mean(&state)?;
            let action = action_from_vector(kind, &mean);
            let outcome = env.step(&action)?;
            if outcome.aborted {
                final_mse = S::infinity();
                break;
            }
            if let Some(last) = outcome.iteration_metrics.last() {
                final_mse = last.1;
            }
            raw = outcome.state;
        }
        total = total + final_mse;
    }
    Ok(total / S::c(instances.len() as f64))
}

struct RolloutCollector<S: Scalar> {
    transitions: Vec<Transition<S>>,
    raw_states: Vec<Array1<S>>,
    episode_returns: Vec<S>,
}

fn collect_rollouts<S: Scalar>(
    policy: &GaussianPolicy<S>,
    value: &Mlp<S>,
    normalizer: &Normalizer<S>,
    instances: &[ProblemInstance<S>],
    graph: &Graph,
    env_cfg: &EnvConfig<S>,
    episodes: usize,
    episode_offset: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutCollector<S>> {
    let mut out = RolloutCollector {
        transitions: Vec::new(),
        raw_states: Vec::new(),
        episode_returns: Vec::new(),
    };
    for e in 0..episodes {
        let inst = &instances[(episode_offset + e) % instances.len()];
        let kind = inst.kind();
        let mut env = Env::new(inst, graph, env_cfg.clone())?;
        let seed = rng.random::<u64>();
        let mut raw = env.reset(seed)?;
        let mut episode_return = S::zero();
        loop {
            out.raw_states.push(raw.clone());
            let state = normalizer.normalize(&raw)?;
            let sampled = policy.sample(&state, rng)?;
            let action = action_from_vector(kind, &sampled.action);
            let outcome = env.step(&action)?;
            episode_return = episode_return + outcome.reward;
            let v = value.forward(&state)?[0];
            out.transitions.push(Transition {
                state,
                action: sampled.action,
                reward: outcome.reward,
                log_prob: sampled.log_prob,
                value: v,
                done: outcome.done,
            });
            raw = outcome.state;
            if outcome.done {
                break;
            }
        }
        out.episode_returns.push(episode_return);
    }
    Ok(out)
}

/// Trains a policy on the training set, keeping whichever update scored the
/// lowest validation error. Fully determined by `(cfg.seed, cfg, inputs)`.
pub fn train<S: Scalar>(
    train_set: &[ProblemInstance<S>],
    val_set: &[ProblemInstance<S>],
    graph: &Graph,
    cfg: &TrainConfig<S>,
) -> Result<TrainOutput<S>> {
    cfg.env.validate()?;
    check_instance_set(train_set, graph, "training")?;
    check_instance_set(val_set, graph, "validation")?;
    if cfg.episodes_per_update == 0 || cfg.eval_interval == 0 {
        return Err(Error::InvalidParameter(
            "episodes per update and evaluation interval must be positive".into(),
        ));
    }
    let kind = train_set[0].kind();
    let probe = Env::new(&train_set[0], graph, cfg.env.clone())?;
    let state_dim = probe.state_dim();
    let act_dim = action_dim(kind);

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut rollout_rng = ChaCha8Rng::seed_from_u64(master.random());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.random());

    let mut policy = GaussianPolicy::new(
        Mlp::new(state_dim, cfg.hidden, act_dim, &mut init_rng)?,
        cfg.initial_log_std,
    )?;
    let mut value: Mlp<S> = Mlp::new(state_dim, cfg.hidden, 1, &mut init_rng)?;
    let mut normalizer = Normalizer::new(state_dim);

    // State-forming rollouts under the initial policy: Gaussian exploration
    // around the baseline action with the configured spread. The exact
    // baseline would revisit the same handful of states every episode (the
    // environment is deterministic per instance), leaving the normalizer a
    // sample too thin to standardize unseen instances.
    let target = baseline_vector(kind, &cfg.env.baseline);
    let spread = cfg.initial_log_std.exp();
    let mut clone_states_raw = Vec::with_capacity(cfg.pretrain_states);
    let mut episode = 0usize;
    while clone_states_raw.len() < cfg.pretrain_states {
        let inst = &train_set[episode % train_set.len()];
        let mut env = Env::new(inst, graph, cfg.env.clone())?;
        let seed = rollout_rng.random::<u64>();
        let mut raw = env.reset(seed)?;
        loop {
            clone_states_raw.push(raw.clone());
            if clone_states_raw.len() >= cfg.pretrain_states {
                break;
            }
            let jittered =
                target.mapv(|m| m + spread * S::standard_normal(&mut rollout_rng));
            let outcome = env.step(&action_from_vector(kind, &jittered))?;
            raw = outcome.state;
            if outcome.done {
                break;
            }
        }
        episode += 1;
    }
    for s in &clone_states_raw {
        normalizer.observe(s)?;
    }
    let clone_states: Vec<Array1<S>> = clone_states_raw
        .iter()
        .map(|s| normalizer.normalize(s))
        .collect::<Result<_>>()?;
    let mut clone_opt = Adam::new(policy.flat_len());
    let report = pretrain_behavior_clone(
        &mut policy,
        &clone_states,
        &target,
        cfg.pretrain_epochs,
        cfg.pretrain_lr,
        &mut clone_opt,
    )?;

    let meta = CheckpointMeta {
        seed: cfg.seed,
        problem_dimension: train_set[0].dimension(),
        node_count: graph.node_count(),
    };
    let mut best_val = validate_policy(&policy, &normalizer, val_set, graph, &cfg.env)?;
    let mut best = Checkpoint {
        policy: policy.clone(),
        value: value.clone(),
        normalizer: normalizer.clone(),
        meta: meta.clone(),
    };
    let mut best_update = 0usize;

    let mut opt_policy = Adam::new(policy.flat_len());
    let mut opt_value = Adam::new(value.flat_len());
    let mut curves = Vec::with_capacity(cfg.updates);
    let mut last_val = best_val;
    let mut episode_counter = 0usize;

    for update_idx in 1..=cfg.updates {
        let rollout = collect_rollouts(
            &policy,
            &value,
            &normalizer,
            train_set,
            graph,
            &cfg.env,
            cfg.episodes_per_update,
            episode_counter,
            &mut rollout_rng,
        )?;
        episode_counter += cfg.episodes_per_update;
        let batch = RolloutBatch::compute_advantages(
            rollout.transitions,
            cfg.ppo.gamma,
            cfg.ppo.gae_lambda,
        );
        let stats = match ppo_update(
            &mut policy,
            &mut value,
            &batch,
            &cfg.ppo,
            &mut opt_policy,
            &mut opt_value,
            &mut shuffle_rng,
        ) {
            Ok(stats) => Some(stats),
            // The nets were restored; skip this update and keep training.
            Err(Error::Nonconverged { .. }) => None,
            Err(other) => return Err(other),
        };
        for s in &rollout.raw_states {
            normalizer.observe(s)?;
        }
        let mean_return = rollout
            .episode_returns
            .iter()
            .fold(S::zero(), |a, &r| a + r)
            / S::c(rollout.episode_returns.len().max(1) as f64);

        if update_idx % cfg.eval_interval == 0 {
            last_val = validate_policy(&policy, &normalizer, val_set, graph, &cfg.env)?;
            if last_val < best_val {
                best_val = last_val;
                best = Checkpoint {
                    policy: policy.clone(),
                    value: value.clone(),
                    normalizer: normalizer.clone(),
                    meta: meta.clone(),
                };
                best_update = update_idx;
            }
        }
        curves.push(CurvePoint {
            update_idx,
            mean_return,
            val_mse: last_val,
            clip_frac: stats.map_or(S::zero(), |s| s.clip_fraction),
            policy_loss: stats.map_or(S::zero(), |s| s.policy_loss),
            value_loss: stats.map_or(S::zero(), |s| s.value_loss),
        });
    }

    Ok(TrainOutput {
        checkpoint: best,
        curves,
        pretrain_loss: report.final_loss,
        best_val_mse: best_val,
        best_update_idx: best_update,
    })
}

/// One traced iteration of an evaluation rollout.
#[derive(Debug, Clone, Copy)]
pub struct EvalRow<S: Scalar> {
    pub iteration: usize,
    pub mse: S,
    pub objective_error: S,
    pub consensus_error: S,
    pub action: ActionTriple<S>,
}

/// Deterministic mean-action rollout for `rounds` rounds (which may exceed
/// the training horizon). Returns per-iteration metric rows; a diverged
/// rollout returns the rows gathered up to the abort.
pub fn evaluate<S: Scalar>(
    checkpoint: &Checkpoint<S>,
    inst: &ProblemInstance<S>,
    graph: &Graph,
    env_cfg: &EnvConfig<S>,
    rounds: usize,
    seed: u64,
) -> Result<Vec<EvalRow<S>>> {
    let kind = inst.kind();
    let mut env = Env::new(inst, graph, env_cfg.clone())?;
    checkpoint.require_compatible(env.state_dim(), env.action_dim())?;
    let mut raw = env.reset(seed)?;
    let mut rows = Vec::with_capacity(rounds * env_cfg.iterations_per_round);
    for _ in 0..rounds {
        let state = checkpoint.normalizer.normalize(&raw)?;
        let mean = checkpoint.policy.mean(&state)?;
        let action = action_from_vector(kind, &mean);
        let outcome = env.step(&action)?;
        for &(iteration, mse, obj, cons) in &outcome.iteration_metrics {
            rows.push(EvalRow {
                iteration,
                mse,
                objective_error: obj,
                consensus_error: cons,
                action,
            });
        }
        if outcome.aborted {
            break;
        }
        raw = outcome.state;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::label_instance;
    use crate::problems::{sample_instance, synthetic_pool, LocalObjective, Sample};
    use ndarray::array;

    fn labeled_instance(
        kind: ProblemKind,
        nodes: usize,
        dim: usize,
        seed: u64,
    ) -> (ProblemInstance<f64>, Graph) {
        let pool = synthetic_pool::<f64>(kind, nodes * 4 + 20, dim, seed);
        let mut inst = sample_instance(
            format!("rl-{}-{seed}", kind.as_str()),
            &pool,
            nodes,
            nodes * 2,
            0.05,
            kind,
            seed ^ 0x9e37,
        )
        .unwrap();
        label_instance(&mut inst).unwrap();
        let edges: Vec<(usize, usize)> = (1..nodes).map(|i| (i - 1, i)).collect();
        let graph = Graph::from_edges(nodes, edges).unwrap();
        (inst, graph)
    }

    fn zero_target_instance(nodes: usize) -> (ProblemInstance<f64>, Graph) {
        // All labels zero with a quadratic term: x* = 0 exactly, and the
        // zero-initialized network already sits on it.
        let objectives = (0..nodes)
            .map(|_| {
                LocalObjective::new(
                    ProblemKind::LeastSquaresLasso,
                    &[Sample {
                        features: array![1.0],
                        label: 0.0,
                    }],
                    0.0,
                )
                .unwrap()
            })
            .collect();
        let mut inst = ProblemInstance::new("zeros", objectives).unwrap();
        inst.set_x_star(array![0.0]).unwrap();
        let edges: Vec<(usize, usize)> = (1..nodes).map(|i| (i - 1, i)).collect();
        (inst, Graph::from_edges(nodes, edges).unwrap())
    }

    fn tiny_env_cfg() -> EnvConfig<f64> {
        EnvConfig {
            rounds_per_episode: 2,
            iterations_per_round: 2,
            solve: SolveSettings {
                tol: 1e-8,
                max_inner: 2000,
            },
            ..EnvConfig::default()
        }
    }

    #[test]
    fn state_dimensions_follow_the_flatten_rule() {
        let (inst, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 10, 10, 1);
        let cfg = EnvConfig {
            rounds_per_episode: 10,
            iterations_per_round: 10,
            ..EnvConfig::default()
        };
        let mut env = Env::new(&inst, &graph, cfg.clone()).unwrap();
        assert_eq!(env.state_dim(), 10 * 10 * 30);
        let s0 = env.reset(7).unwrap();
        assert_eq!(s0.len(), 3000);

        let (inst1, graph1) = labeled_instance(ProblemKind::L1Lasso, 10, 10, 2);
        let mut env1 = Env::new(&inst1, &graph1, cfg).unwrap();
        assert_eq!(env1.state_dim(), 10 * 10 * 10);
        let s1 = env1.reset(7).unwrap();
        assert_eq!(s1.len(), 1000);
        assert_eq!(env1.action_dim(), 2);
    }

    #[test]
    fn reset_and_step_are_deterministic() {
        let (inst, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 3, 2, 3);
        let cfg = tiny_env_cfg();
        let action = ActionTriple::new(1.0, 3.0, 0.5).unwrap();
        let run = || {
            let mut env = Env::new(&inst, &graph, cfg.clone()).unwrap();
            let s0 = env.reset(11).unwrap();
            let out = env.step(&action).unwrap();
            (s0, out.state, out.reward)
        };
        let (a0, a1, ar) = run();
        let (b0, b1, br) = run();
        assert_eq!(a0, b0);
        assert_eq!(a1, b1);
        assert_eq!(ar, br);
    }

    #[test]
    fn reward_is_zero_exactly_on_the_optimum() {
        let (inst, graph) = zero_target_instance(3);
        for shaping in [RewardShaping::Raw, RewardShaping::Log] {
            let cfg = EnvConfig {
                shaping,
                ..tiny_env_cfg()
            };
            let mut env = Env::new(&inst, &graph, cfg).unwrap();
            env.reset(0).unwrap();
            let out = env.step(&ActionTriple::baseline()).unwrap();
            assert_eq!(out.reward, 0.0);
            assert!(!out.aborted);
        }
    }

    #[test]
    fn hand_reward_arithmetic_matches() {
        // Ten iterations stuck at mse 1 (two nodes at 1 and 3 around x*=2).
        let mses = [1.0_f64; 10];
        assert_eq!(shaped_reward(RewardShaping::Raw, &mses), -10.0);
        let log = shaped_reward(RewardShaping::Log, &mses);
        let expected = -(1.0_f64 + 1e6).log10();
        assert!((log - expected).abs() < 1e-12);
        assert_eq!(shaped_reward::<f64>(RewardShaping::Raw, &[]), 0.0);
        assert!(shaped_reward(RewardShaping::Log, &[0.0, 0.0]) == 0.0);
    }

    #[test]
    fn episodes_end_after_the_configured_rounds() {
        let (inst, graph) = labeled_instance(ProblemKind::Logistic, 3, 2, 4);
        let mut env = Env::new(&inst, &graph, tiny_env_cfg()).unwrap();
        env.reset(1).unwrap();
        let mut steps = 0;
        loop {
            let out = env.step(&ActionTriple::baseline()).unwrap();
            steps += 1;
            if out.done {
                break;
            }
        }
        assert_eq!(steps, 2);
        // Beyond the horizon is allowed (longer evaluation); still flagged done.
        let out = env.step(&ActionTriple::baseline()).unwrap();
        assert!(out.done);
        assert!(!out.aborted);
    }

    #[test]
    fn divergence_aborts_with_the_terminal_penalty() {
        let (inst, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 3, 2, 5);
        let cfg = EnvConfig {
            abort_threshold: 1e-12,
            ..tiny_env_cfg()
        };
        let mut env = Env::new(&inst, &graph, cfg.clone()).unwrap();
        env.reset(2).unwrap();
        let out = env.step(&ActionTriple::baseline()).unwrap();
        assert!(out.aborted);
        assert!(out.done);
        assert!(out.reward <= cfg.abort_penalty);
        assert!(env.step(&ActionTriple::baseline()).is_err());
    }

    #[test]
    fn action_vectors_map_into_the_box_per_kind() {
        let a = action_from_vector(ProblemKind::LeastSquaresLasso, &array![-1.0, 30.0, 5.0]);
        assert_eq!(
            (a.alpha(), a.beta(), a.rho()),
            (0.0, crate::engine::BETA_MAX, 5.0)
        );
        let b = action_from_vector(ProblemKind::L1Lasso, &array![7.0, -5.0]);
        assert_eq!(b.alpha(), 0.0);
        assert_eq!(b.beta(), 7.0);
        assert_eq!(b.rho(), crate::engine::RHO_MIN);
        assert_eq!(
            baseline_vector(ProblemKind::L1Lasso, &ActionTriple::<f64>::baseline()),
            array![5.0, 5.0]
        );
    }

    fn hand_batch(rewards: &[f64], values: &[f64]) -> Vec<Transition<f64>> {
        let n = rewards.len();
        (0..n)
            .map(|t| Transition {
                state: array![0.0],
                action: array![0.0],
                reward: rewards[t],
                log_prob: 0.0,
                value: values[t],
                done: t + 1 == n,
            })
            .collect()
    }

    #[test]
    fn undiscounted_full_advantages_telescope() {
        let rewards = [1.0, -2.0, 0.5, 3.0];
        let values = [0.3, -0.1, 0.2, 0.4];
        let batch =
            RolloutBatch::compute_advantages(hand_batch(&rewards, &values), 1.0, 1.0);
        for t in 0..4 {
            let future: f64 = rewards[t..].iter().sum();
            assert!((batch.advantages[t] - (future - values[t])).abs() < 1e-12);
            assert!((batch.returns[t] - future).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_reduces_to_one_step_td() {
        let rewards = [1.0, -2.0, 0.5];
        let values = [0.3, -0.1, 0.2];
        let gamma = 0.9;
        let batch =
            RolloutBatch::compute_advantages(hand_batch(&rewards, &values), gamma, 0.0);
        for t in 0..3 {
            let next = if t + 1 < 3 { values[t + 1] } else { 0.0 };
            let td = rewards[t] + gamma * next - values[t];
            assert!((batch.advantages[t] - td).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_values_zero_the_advantages() {
        let gamma = 0.9;
        let rewards = [2.0; 5];
        let mut values = [0.0; 5];
        let mut acc = 0.0;
        for t in (0..5).rev() {
            acc = rewards[t] + gamma * acc;
            values[t] = acc;
        }
        let batch =
            RolloutBatch::compute_advantages(hand_batch(&rewards, &values), gamma, 0.7);
        assert!(batch.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn advantages_reset_at_episode_boundaries() {
        // Two episodes of two steps each, all rewards 1, values 0.
        let mut transitions = hand_batch(&[1.0, 1.0], &[0.0, 0.0]);
        transitions.extend(hand_batch(&[1.0, 1.0], &[0.0, 0.0]));
        let batch = RolloutBatch::compute_advantages(transitions, 1.0, 1.0);
        assert_eq!(batch.advantages, array![2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_variance() {
        let batch = RolloutBatch::compute_advantages(
            hand_batch(&[1.0, -2.0, 0.5, 3.0, -1.0], &[0.0; 5]),
            0.99,
            0.95,
        );
        let normed = batch.normalized_advantages();
        let mean: f64 = normed.iter().sum::<f64>() / normed.len() as f64;
        let var: f64 =
            normed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / normed.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clip_arithmetic_matches_the_definition() {
        assert_eq!(clipped_surrogate(1.5, 2.0, 0.2), 1.2 * 2.0);
        // Negative advantage: the min picks the clipped (more pessimistic) term.
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), 0.8 * -1.0);
        assert_eq!(clipped_surrogate(1.1, 3.0, 0.2), 1.1 * 3.0);
        // Term-by-term the clipped surrogate never exceeds the raw one.
        for i in 0..100 {
            let r = 0.02 * i as f64;
            for &adv in &[-2.0, -0.3, 0.0, 0.7, 4.0] {
                assert!(clipped_surrogate(r, adv, 0.2) <= r * adv + 1e-15);
            }
        }
    }

    fn synthetic_rollout(seed: u64, len: usize, state_dim: usize) -> RolloutBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net: Mlp<f64> = Mlp::new(state_dim, 6, 2, &mut rng).unwrap();
        let policy = GaussianPolicy::new(net, -0.2).unwrap();
        let transitions: Vec<Transition<f64>> = (0..len)
            .map(|t| {
                let state =
                    Array1::from_shape_fn(state_dim, |_| rng.random_range(-1.0..1.0));
                let sampled = policy.sample(&state, &mut rng).unwrap();
                Transition {
                    state,
                    action: sampled.action,
                    reward: rng.random_range(-2.0..0.0),
                    log_prob: sampled.log_prob,
                    value: rng.random_range(-1.0..1.0),
                    done: (t + 1) % 4 == 0,
                }
            })
            .collect();
        RolloutBatch::compute_advantages(transitions, 0.99, 0.95)
    }

    #[test]
    fn ratios_are_one_before_the_first_gradient_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let net: Mlp<f64> = Mlp::new(4, 6, 2, &mut rng).unwrap();
        // The batch actions were sampled from this same policy, so the
        // stored log-probabilities must reproduce exactly.
        let mut policy = GaussianPolicy::new(net, -0.2).unwrap();
        let mut batch = synthetic_rollout(40, 12, 4);
        for tr in &mut batch.transitions {
            tr.log_prob = policy.log_prob(&tr.state, &tr.action).unwrap();
        }
        let mut value: Mlp<f64> = Mlp::new(4, 6, 1, &mut rng).unwrap();
        let mut op = Adam::new(policy.flat_len());
        let mut ov = Adam::new(value.flat_len());
        let stats = ppo_update(
            &mut policy,
            &mut value,
            &batch,
            &PpoConfig {
                epochs: 1,
                minibatch: 4,
                ..PpoConfig::default()
            },
            &mut op,
            &mut ov,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(stats.pre_update_ratio_gap <= 1e-6);
        assert!(stats.policy_loss.is_finite());
        assert!(stats.value_loss.is_finite());
        assert!((0.0..=1.0).contains(&stats.clip_fraction));
    }

    #[test]
    fn non_finite_losses_roll_the_update_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let net: Mlp<f64> = Mlp::new(3, 5, 2, &mut rng).unwrap();
        let mut policy = GaussianPolicy::new(net, 0.0).unwrap();
        let mut value: Mlp<f64> = Mlp::new(3, 5, 1, &mut rng).unwrap();
        let mut batch = synthetic_rollout(50, 8, 3);
        batch.advantages[3] = f64::NAN;
        let p0 = policy.to_flat();
        let v0 = value.to_flat();
        let mut op = Adam::new(policy.flat_len());
        let mut ov = Adam::new(value.flat_len());
        let err = ppo_update(
            &mut policy,
            &mut value,
            &batch,
            &PpoConfig::default(),
            &mut op,
            &mut ov,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        assert!(matches!(err, Err(Error::Nonconverged { .. })));
        assert_eq!(policy.to_flat(), p0);
        assert_eq!(value.to_flat(), v0);
    }

    #[test]
    fn cloning_pins_the_mean_to_the_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let net: Mlp<f64> = Mlp::new(5, 8, 3, &mut rng).unwrap();
        let mut policy = GaussianPolicy::new(net, -0.3).unwrap();
        let states: Vec<Array1<f64>> = (0..24)
            .map(|_| Array1::from_shape_fn(5, |_| rng.random_range(-2.0..2.0)))
            .collect();
        let held_out: Vec<Array1<f64>> = (0..8)
            .map(|_| Array1::from_shape_fn(5, |_| rng.random_range(-2.0..2.0)))
            .collect();
        let target = array![5.0, 5.0, 5.0];
        let mut opt = Adam::new(policy.flat_len());
        let report = pretrain_behavior_clone(
            &mut policy,
            &states,
            &target,
            3000,
            1e-2,
            &mut opt,
        )
        .unwrap();
        assert!(report.final_loss < 0.01, "loss {}", report.final_loss);
        for s in &held_out {
            let mean = policy.mean(s).unwrap();
            for j in 0..3 {
                let rel = (mean[j] - 5.0).abs() / 5.0;
                assert!(rel <= 0.05, "coordinate {j} off by {rel}");
            }
        }
        // The exploration spread is not part of the regression.
        assert_eq!(policy.log_std(), &array![-0.3, -0.3, -0.3]);
    }

    #[test]
    fn zero_clone_epochs_leave_the_policy_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let net: Mlp<f64> = Mlp::new(4, 6, 2, &mut rng).unwrap();
        let mut policy = GaussianPolicy::new(net, 0.1).unwrap();
        let before = policy.to_flat();
        let states = vec![Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0))];
        let mut opt = Adam::new(policy.flat_len());
        let report =
            pretrain_behavior_clone(&mut policy, &states, &array![5.0, 5.0], 0, 1e-2, &mut opt)
                .unwrap();
        assert_eq!(policy.to_flat(), before);
        assert!(report.final_loss.is_finite());
    }

    #[test]
    fn cloning_a_constant_ignores_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let states: Vec<Array1<f64>> = (0..12)
            .map(|_| Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)))
            .collect();
        let mut reversed = states.clone();
        reversed.reverse();
        let target = array![5.0, 5.0];
        let probe = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let mut outputs = Vec::new();
        for set in [&states, &reversed] {
            let net: Mlp<f64> = Mlp::new(3, 6, 2, &mut ChaCha8Rng::seed_from_u64(63)).unwrap();
            let mut policy = GaussianPolicy::new(net, 0.0).unwrap();
            let mut opt = Adam::new(policy.flat_len());
            pretrain_behavior_clone(&mut policy, set, &target, 1500, 1e-2, &mut opt).unwrap();
            outputs.push(policy.mean(&probe).unwrap());
        }
        for j in 0..2 {
            assert!((outputs[0][j] - outputs[1][j]).abs() < 1e-6);
        }
    }

    fn tiny_train_setup() -> (Vec<ProblemInstance<f64>>, Vec<ProblemInstance<f64>>, Graph) {
        let (a, graph) = labeled_instance(ProblemKind::LeastSquaresLasso, 2, 1, 70);
        let (b, _) = labeled_instance(ProblemKind::LeastSquaresLasso, 2, 1, 71);
        let (c, _) = labeled_instance(ProblemKind::LeastSquaresLasso, 2, 1, 72);
        (vec![a, b], vec![c], graph)
    }

    fn tiny_train_cfg(updates: usize) -> TrainConfig<f64> {
        TrainConfig {
            env: tiny_env_cfg(),
            ppo: PpoConfig {
                epochs: 2,
                minibatch: 8,
                ..PpoConfig::default()
            },
            updates,
            episodes_per_update: 2,
            eval_interval: 1,
            pretrain_states: 12,
            pretrain_epochs: 120,
            pretrain_lr: 1e-2,
            hidden: 6,
            initial_log_std: -0.5,
            seed: 7,
        }
    }

    #[test]
    fn training_is_reproducible_end_to_end() {
        let (train_set, val_set, graph) = tiny_train_setup();
        let cfg = tiny_train_cfg(2);
        let a = train(&train_set, &val_set, &graph, &cfg).unwrap();
        let b = train(&train_set, &val_set, &graph, &cfg).unwrap();
        assert_eq!(a.curves.len(), 2);
        for (x, y) in a.curves.iter().zip(b.curves.iter()) {
            assert_eq!(x.mean_return, y.mean_return);
            assert_eq!(x.val_mse, y.val_mse);
            assert_eq!(x.policy_loss, y.policy_loss);
        }
        assert_eq!(
            a.checkpoint.policy.to_flat(),
            b.checkpoint.policy.to_flat()
        );
        assert_eq!(a.best_val_mse, b.best_val_mse);
    }

    #[test]
    fn zero_updates_return_the_pretrained_policy() {
        let (train_set, val_set, graph) = tiny_train_setup();
        let out = train(&train_set, &val_set, &graph, &tiny_train_cfg(0)).unwrap();
        assert!(out.curves.is_empty());
        assert_eq!(out.best_update_idx, 0);
        // The checkpoint mean should sit near the cloning target.
        let probe = Array1::zeros(out.checkpoint.policy.state_dim());
        let mean = out.checkpoint.policy.mean(&probe).unwrap();
        for j in 0..3 {
            assert!((mean[j] - 5.0).abs() < 1.0, "mean {}", mean[j]);
        }
    }

    #[test]
    fn evaluation_traces_cover_longer_horizons_without_mutation() {
        let (train_set, val_set, graph) = tiny_train_setup();
        let out = train(&train_set, &val_set, &graph, &tiny_train_cfg(1)).unwrap();
        let ck = out.checkpoint.clone();
        let rows = evaluate(&ck, &val_set[0], &graph, &tiny_env_cfg(), 3, 5).unwrap();
        // Horizon 3 rounds > training horizon 2; two iterations per round.
        assert_eq!(rows.len(), 6);
        let again = evaluate(&ck, &val_set[0], &graph, &tiny_env_cfg(), 3, 5).unwrap();
        for (r, s) in rows.iter().zip(again.iter()) {
            assert_eq!(r.mse, s.mse);
            assert_eq!(r.iteration, s.iteration);
        }
        assert_eq!(ck.policy, out.checkpoint.policy);
        assert_eq!(ck.normalizer, out.checkpoint.normalizer);
        let mismatched = labeled_instance(ProblemKind::LeastSquaresLasso, 3, 2, 99);
        assert!(matches!(
            evaluate(&ck, &mismatched.0, &mismatched.1, &tiny_env_cfg(), 2, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
