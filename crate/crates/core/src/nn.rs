//! Minimal dense network stack for the policy and value functions.
//!
//! Two-hidden-layer perceptrons with tanh activations, a diagonal Gaussian
//! policy head with state-independent log standard deviation, hand-rolled
//! reverse-mode gradients over the fixed compute graph, Adam, running state
//! normalization, and a versioned text checkpoint format. The architectures
//! are static, so a general tape brings nothing here.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hidden width used by both hidden layers unless a caller picks its own.
pub const DEFAULT_HIDDEN: usize = 64;

/// Checkpoint format integer; bumped on any layout change.
pub const CHECKPOINT_FORMAT: u32 = 1;

/// Bound on standardized observations, in standard deviations. Statistics
/// come from a finite sample, so a fresh instance can sit tens of nominal
/// deviations out on coordinates the sample barely moved; the clip keeps such
/// spikes from throwing the networks into regions they never fit.
pub const OBS_CLIP: f64 = 10.0;

fn half_ln_two_pi<S: Scalar>() -> S {
    S::c(0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Dense network `input → h1 (tanh) → h2 (tanh) → output (linear)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S: Scalar> {
    weights: [Array2<S>; 3],
    biases: [Array1<S>; 3],
}

/// Forward-pass record consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache<S: Scalar> {
    input: Array1<S>,
    h1: Array1<S>,
    h2: Array1<S>,
}

/// Parameter gradients with the same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads<S: Scalar> {
    weights: [Array2<S>; 3],
    biases: [Array1<S>; 3],
}

impl<S: Scalar> Mlp<S> {
    /// Fresh network with uniform `±1/√fan_in` weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Mlp<S>> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::InvalidParameter(
                "network dimensions must be positive".into(),
            ));
        }
        let mut layer = |rows: usize, cols: usize| {
            let scale = S::one() / S::c((cols as f64).sqrt());
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
        };
        let weights = [
            layer(hidden, input),
            layer(hidden, hidden),
            layer(output, hidden),
        ];
        let biases = [
            Array1::zeros(hidden),
            Array1::zeros(hidden),
            Array1::zeros(output),
        ];
        Mlp::from_parts(weights, biases)
    }

    /// Builds a network from explicit tensors, validating the shape chain
    /// and finiteness.
    pub fn from_parts(weights: [Array2<S>; 3], biases: [Array1<S>; 3]) -> Result<Mlp<S>> {
        for i in 0..3 {
            if biases[i].len() != weights[i].nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} bias length {} vs {} rows",
                    i + 1,
                    biases[i].len(),
                    weights[i].nrows()
                )));
            }
            if i > 0 && weights[i].ncols() != weights[i - 1].nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} takes {} inputs but layer {} outputs {}",
                    i + 1,
                    weights[i].ncols(),
                    i,
                    weights[i - 1].nrows()
                )));
            }
            if weights[i].iter().any(|v| !v.is_finite())
                || biases[i].iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidParameter(
                    "network parameters must be finite".into(),
                ));
            }
        }
        Ok(Mlp { weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn hidden_dims(&self) -> (usize, usize) {
        (self.weights[0].nrows(), self.weights[1].nrows())
    }

    pub fn output_dim(&self) -> usize {
        self.weights[2].nrows()
    }

    fn check_input(&self, input: &Array1<S>) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} vs network input {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Array1<S>) -> Result<Array1<S>> {
        self.check_input(input)?;
        let h1 = (self.weights[0].dot(input) + &self.biases[0]).mapv(|z| z.tanh());
        let h2 = (self.weights[1].dot(&h1) + &self.biases[1]).mapv(|z| z.tanh());
        Ok(self.weights[2].dot(&h2) + &self.biases[2])
    }

    /// Forward pass that records the activations needed for [`Mlp::backward`].
    pub fn forward_cached(&self, input: &Array1<S>) -> Result<(Array1<S>, MlpCache<S>)> {
        self.check_input(input)?;
        let h1 = (self.weights[0].dot(input) + &self.biases[0]).mapv(|z| z.tanh());
        let h2 = (self.weights[1].dot(&h1) + &self.biases[1]).mapv(|z| z.tanh());
        let out = self.weights[2].dot(&h2) + &self.biases[2];
        Ok((
            out,
            MlpCache {
                input: input.clone(),
                h1,
                h2,
            },
        ))
    }

    /// Accumulates `∂loss/∂params` into `grads` given `∂loss/∂output`, and
    /// returns `∂loss/∂input`. Caller may reuse `grads` across a minibatch.
    pub fn backward(
        &self,
        cache: &MlpCache<S>,
        dout: &Array1<S>,
        grads: &mut MlpGrads<S>,
    ) -> Array1<S> {
        assert_eq!(dout.len(), self.output_dim(), "loss gradient shape");
        accumulate_outer(&mut grads.weights[2], dout, &cache.h2);
        grads.biases[2] += dout;
        let dh2 = self.weights[2].t().dot(dout);
        let dz2 = &dh2 * &cache.h2.mapv(|h| S::one() - h * h);
        accumulate_outer(&mut grads.weights[1], &dz2, &cache.h1);
        grads.biases[1] += &dz2;
        let dh1 = self.weights[1].t().dot(&dz2);
        let dz1 = &dh1 * &cache.h1.mapv(|h| S::one() - h * h);
        accumulate_outer(&mut grads.weights[0], &dz1, &cache.input);
        grads.biases[0] += &dz1;
        self.weights[0].t().dot(&dz1)
    }

    /// Scales every weight matrix by `keep`, leaving biases alone; the
    /// decoupled weight-decay step of ridge-regularized fits.
    pub fn decay_weights(&mut self, keep: S) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * keep);
        }
    }

    /// Zero gradient buffers shaped like this network.
    pub fn zero_grads(&self) -> MlpGrads<S> {
        MlpGrads {
            weights: [
                Array2::zeros(self.weights[0].raw_dim()),
                Array2::zeros(self.weights[1].raw_dim()),
                Array2::zeros(self.weights[2].raw_dim()),
            ],
            biases: [
                Array1::zeros(self.biases[0].len()),
                Array1::zeros(self.biases[1].len()),
                Array1::zeros(self.biases[2].len()),
            ],
        }
    }

    pub fn flat_len(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters as one row-major vector (w1, b1, w2, b2, w3, b3).
    pub fn to_flat(&self) -> Array1<S> {
        let mut out = Vec::with_capacity(self.flat_len());
        for i in 0..3 {
            out.extend(self.weights[i].iter().copied());
            out.extend(self.biases[i].iter().copied());
        }
        Array1::from(out)
    }

    /// Writes parameters back from the [`Mlp::to_flat`] layout.
    pub fn set_flat(&mut self, flat: &Array1<S>) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter length {} vs {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut iter = flat.iter().copied();
        for i in 0..3 {
            for v in self.weights[i].iter_mut() {
                *v = iter.next().expect("length checked");
            }
            for v in self.biases[i].iter_mut() {
                *v = iter.next().expect("length checked");
            }
        }
        Ok(())
    }
}

impl<S: Scalar> MlpGrads<S> {
    /// Gradients in the [`Mlp::to_flat`] layout.
    pub fn to_flat(&self) -> Array1<S> {
        let len = self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>();
        let mut out = Vec::with_capacity(len);
        for i in 0..3 {
            out.extend(self.weights[i].iter().copied());
            out.extend(self.biases[i].iter().copied());
        }
        Array1::from(out)
    }
}

fn accumulate_outer<S: Scalar>(target: &mut Array2<S>, left: &Array1<S>, right: &Array1<S>) {
    for (r, &l) in left.iter().enumerate() {
        if l == S::zero() {
            continue;
        }
        let mut row = target.row_mut(r);
        for (c, &x) in right.iter().enumerate() {
            row[c] = row[c] + l * x;
        }
    }
}

/// Diagonal Gaussian policy: a mean network plus a state-independent
/// log standard deviation per action coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy<S: Scalar> {
    mean_net: Mlp<S>,
    log_std: Array1<S>,
}

/// One draw from the policy with its log-density.
#[derive(Debug, Clone)]
pub struct Sampled<S: Scalar> {
    pub action: Array1<S>,
    pub log_prob: S,
}

/// Gradient buffers for a [`GaussianPolicy`].
#[derive(Debug, Clone)]
pub struct PolicyGrads<S: Scalar> {
    pub mean: MlpGrads<S>,
    pub log_std: Array1<S>,
}

impl<S: Scalar> PolicyGrads<S> {
    pub fn to_flat(&self) -> Array1<S> {
        let mean = self.mean.to_flat();
        let mut out = mean.to_vec();
        out.extend(self.log_std.iter().copied());
        Array1::from(out)
    }
}

/// Diagonal Gaussian log-density `Σ_j [−½log 2π − log σ_j − (a_j−μ_j)²/(2σ_j²)]`.
pub fn gaussian_log_prob<S: Scalar>(
    mean: &Array1<S>,
    log_std: &Array1<S>,
    action: &Array1<S>,
) -> S {
    let mut total = S::zero();
    for j in 0..mean.len() {
        let sigma = log_std[j].exp();
        let z = (action[j] - mean[j]) / sigma;
        total = total - half_ln_two_pi::<S>() - log_std[j] - z * z * S::c(0.5);
    }
    total
}

impl<S: Scalar> GaussianPolicy<S> {
    pub fn new(mean_net: Mlp<S>, initial_log_std: S) -> Result<GaussianPolicy<S>> {
        let dim = mean_net.output_dim();
        GaussianPolicy::from_parts(mean_net, Array1::from_elem(dim, initial_log_std))
    }

    pub fn from_parts(mean_net: Mlp<S>, log_std: Array1<S>) -> Result<GaussianPolicy<S>> {
        if log_std.len() != mean_net.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "log_std length {} vs action dimension {}",
                log_std.len(),
                mean_net.output_dim()
            )));
        }
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("log_std must be finite".into()));
        }
        Ok(GaussianPolicy { mean_net, log_std })
    }

    pub fn state_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mean_net.output_dim()
    }

    pub fn mean_net(&self) -> &Mlp<S> {
        &self.mean_net
    }

    pub fn log_std(&self) -> &Array1<S> {
        &self.log_std
    }

    /// [`Mlp::decay_weights`] on the mean network; the spread is not decayed.
    pub fn decay_mean_weights(&mut self, keep: S) {
        self.mean_net.decay_weights(keep);
    }

    /// Mean action: the deterministic (evaluation-time) output.
    pub fn mean(&self, state: &Array1<S>) -> Result<Array1<S>> {
        self.mean_net.forward(state)
    }

    /// Mean action together with the cache needed for gradient accumulation.
    pub fn mean_cached(&self, state: &Array1<S>) -> Result<(Array1<S>, MlpCache<S>)> {
        self.mean_net.forward_cached(state)
    }

    /// Samples an unconstrained action; any clipping into an action box is
    /// the caller's business and the density stays at the raw draw.
    pub fn sample<R: Rng + ?Sized>(&self, state: &Array1<S>, rng: &mut R) -> Result<Sampled<S>> {
        let mean = self.mean_net.forward(state)?;
        let mut action = mean.clone();
        for j in 0..action.len() {
            action[j] = mean[j] + self.log_std[j].exp() * S::standard_normal(rng);
        }
        let log_prob = gaussian_log_prob(&mean, &self.log_std, &action);
        Ok(Sampled { action, log_prob })
    }

    pub fn log_prob(&self, state: &Array1<S>, action: &Array1<S>) -> Result<S> {
        if action.len() != self.action_dim() {
            return Err(Error::ShapeMismatch(format!(
                "action length {} vs {}",
                action.len(),
                self.action_dim()
            )));
        }
        let mean = self.mean_net.forward(state)?;
        Ok(gaussian_log_prob(&mean, &self.log_std, action))
    }

    /// Entropy of the diagonal Gaussian, independent of the state.
    pub fn entropy(&self) -> S {
        let per_dim = S::c(0.5) * (S::one() + S::c((2.0 * std::f64::consts::PI).ln()));
        self.log_std.iter().fold(S::zero(), |acc, &l| acc + l + per_dim)
    }

    /// Accumulates `coef · ∂log π(a|s)/∂θ` into `grads`, reusing the cache
    /// and mean from the forward pass.
    pub fn accumulate_log_prob_grad(
        &self,
        cache: &MlpCache<S>,
        mean: &Array1<S>,
        action: &Array1<S>,
        coef: S,
        grads: &mut PolicyGrads<S>,
    ) {
        let mut dmean = Array1::<S>::zeros(mean.len());
        for j in 0..mean.len() {
            let inv_var = (-(self.log_std[j] + self.log_std[j])).exp();
            let diff = action[j] - mean[j];
            dmean[j] = coef * diff * inv_var;
            grads.log_std[j] = grads.log_std[j] + coef * (diff * diff * inv_var - S::one());
        }
        self.mean_net.backward(cache, &dmean, &mut grads.mean);
    }

    pub fn zero_grads(&self) -> PolicyGrads<S> {
        PolicyGrads {
            mean: self.mean_net.zero_grads(),
            log_std: Array1::zeros(self.log_std.len()),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.mean_net.flat_len() + self.log_std.len()
    }

    /// Parameters as one vector: mean network first, then log_std.
    pub fn to_flat(&self) -> Array1<S> {
        let mut out = self.mean_net.to_flat().to_vec();
        out.extend(self.log_std.iter().copied());
        Array1::from(out)
    }

    pub fn set_flat(&mut self, flat: &Array1<S>) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter length {} vs {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let split = self.mean_net.flat_len();
        let head = Array1::from_iter(flat.iter().take(split).copied());
        self.mean_net.set_flat(&head)?;
        for (j, v) in flat.iter().skip(split).enumerate() {
            self.log_std[j] = *v;
        }
        Ok(())
    }
}

/// Adam moment state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    m: Array1<S>,
    v: Array1<S>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(len: usize) -> Adam<S> {
        Adam {
            m: Array1::zeros(len),
            v: Array1::zeros(len),
            t: 0,
        }
    }
}

/// Bias-corrected adaptive-moment descent step, in place.
pub fn adam_step<S: Scalar>(
    params: &mut Array1<S>,
    grads: &Array1<S>,
    state: &mut Adam<S>,
    lr: S,
    betas: (S, S),
    eps: S,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam state length {} vs params {} and grads {}",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let t = state.t as i32;
    let corr1 = S::one() - b1.powi(t);
    let corr2 = S::one() - b2.powi(t);
    for j in 0..params.len() {
        let g = grads[j];
        state.m[j] = b1 * state.m[j] + (S::one() - b1) * g;
        state.v[j] = b2 * state.v[j] + (S::one() - b2) * g * g;
        let m_hat = state.m[j] / corr1;
        let v_hat = state.v[j] / corr2;
        params[j] = params[j] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Running per-coordinate mean and variance over an observation stream.
///
/// Single-pass moment recursion; updates are applied in arrival order so a
/// rollout batch replays deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<S: Scalar> {
    mean: Array1<S>,
    m2: Array1<S>,
    count: u64,
}

impl<S: Scalar> Normalizer<S> {
    pub fn new(dim: usize) -> Normalizer<S> {
        Normalizer {
            mean: Array1::zeros(dim),
            m2: Array1::zeros(dim),
            count: 0,
        }
    }

    pub fn from_parts(mean: Array1<S>, m2: Array1<S>, count: u64) -> Result<Normalizer<S>> {
        if mean.len() != m2.len() {
            return Err(Error::ShapeMismatch(format!(
                "normalizer mean length {} vs m2 length {}",
                mean.len(),
                m2.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || m2.iter().any(|v| !(*v >= S::zero())) {
            return Err(Error::InvalidParameter(
                "normalizer statistics must be finite with nonnegative spread".into(),
            ));
        }
        Ok(Normalizer { mean, m2, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn observe(&mut self, x: &Array1<S>) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "observation length {} vs normalizer dimension {}",
                x.len(),
                self.mean.len()
            )));
        }
        self.count += 1;
        let inv = S::one() / S::c(self.count as f64);
        for j in 0..x.len() {
            let delta = x[j] - self.mean[j];
            self.mean[j] = self.mean[j] + delta * inv;
            self.m2[j] = self.m2[j] + delta * (x[j] - self.mean[j]);
        }
        Ok(())
    }

    pub fn mean(&self) -> &Array1<S> {
        &self.mean
    }

    /// Population variance of everything observed so far.
    pub fn variance(&self) -> Array1<S> {
        if self.count == 0 {
            return Array1::zeros(self.mean.len());
        }
        let inv = S::one() / S::c(self.count as f64);
        self.m2.mapv(|v| v * inv)
    }

    /// Standardizes a vector; identity before anything was observed. Output
    /// coordinates are clipped to [`OBS_CLIP`] either way, so consumers never
    /// see more than that many standard deviations even on inputs far outside
    /// the observed distribution.
    pub fn normalize(&self, x: &Array1<S>) -> Result<Array1<S>> {
        if x.len() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} vs normalizer dimension {}",
                x.len(),
                self.mean.len()
            )));
        }
        let clip = S::c(OBS_CLIP);
        if self.count == 0 {
            return Ok(x.mapv(|v| v.max(-clip).min(clip)));
        }
        let var = self.variance();
        let mut out = x.clone();
        for j in 0..x.len() {
            let z = (x[j] - self.mean[j]) / (var[j] + S::c(1e-8)).sqrt();
            out[j] = z.max(-clip).min(clip);
        }
        Ok(out)
    }
}

/// Run metadata stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub problem_dimension: usize,
    pub node_count: usize,
}

/// Everything needed to resume or evaluate a trained policy.
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub policy: GaussianPolicy<S>,
    pub value: Mlp<S>,
    pub normalizer: Normalizer<S>,
    pub meta: CheckpointMeta,
}

impl<S: Scalar> Checkpoint<S> {
    /// Refuses a checkpoint whose networks were built for a different
    /// environment shape.
    pub fn require_compatible(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        if self.policy.state_dim() != state_dim || self.policy.action_dim() != action_dim {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint was trained on {}-dim states / {}-dim actions \
                 (problem dimension {}), environment provides {} / {}",
                self.policy.state_dim(),
                self.policy.action_dim(),
                self.meta.problem_dimension,
                state_dim,
                action_dim
            )));
        }
        Ok(())
    }
}

fn push_tensor2<S: Scalar>(out: &mut String, name: &str, t: &Array2<S>) {
    let _ = writeln!(out, "tensor {name} {} {}", t.nrows(), t.ncols());
    for row in t.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

fn push_tensor1<S: Scalar>(out: &mut String, name: &str, t: &Array1<S>) {
    let _ = writeln!(out, "tensor {name} {}", t.len());
    let line: Vec<String> = t.iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "{}", line.join(" "));
}

fn push_mlp<S: Scalar>(out: &mut String, prefix: &str, net: &Mlp<S>) {
    for i in 0..3 {
        push_tensor2(out, &format!("{prefix}.w{}", i + 1), &net.weights[i]);
        push_tensor1(out, &format!("{prefix}.b{}", i + 1), &net.biases[i]);
    }
}

/// Serializes the full training state as versioned structured text.
/// Values use the shortest round-trip decimal form, so a load restores
/// bit-identical parameters.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    policy: &GaussianPolicy<S>,
    value: &Mlp<S>,
    normalizer: &Normalizer<S>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "decopt checkpoint format {CHECKPOINT_FORMAT}");
    let _ = writeln!(out, "seed {}", meta.seed);
    let _ = writeln!(out, "problem_dimension {}", meta.problem_dimension);
    let _ = writeln!(out, "node_count {}", meta.node_count);
    let (p1, p2) = policy.mean_net.hidden_dims();
    let _ = writeln!(
        out,
        "policy_architecture {} {} {} {}",
        policy.state_dim(),
        p1,
        p2,
        policy.action_dim()
    );
    let (v1, v2) = value.hidden_dims();
    let _ = writeln!(
        out,
        "value_architecture {} {} {} {}",
        value.input_dim(),
        v1,
        v2,
        value.output_dim()
    );
    let _ = writeln!(out, "normalizer_count {}", normalizer.count);
    push_mlp(&mut out, "policy.mean", &policy.mean_net);
    push_tensor1(&mut out, "policy.log_std", &policy.log_std);
    push_mlp(&mut out, "value", value);
    push_tensor1(&mut out, "normalizer.mean", &normalizer.mean);
    push_tensor1(&mut out, "normalizer.m2", &normalizer.m2);
    let _ = writeln!(out, "end checkpoint");
    fs::write(path, out)?;
    Ok(())
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> LineReader<'a> {
        LineReader {
            lines: text.lines(),
            line_no: 0,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        for line in self.lines.by_ref() {
            self.line_no += 1;
            if !line.trim().is_empty() {
                return Ok(line.trim());
            }
        }
        Err(Error::Data("checkpoint ends early (truncated file?)".into()))
    }

    fn key_line(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next()?;
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap_or("");
        if head != key {
            return Err(Error::Data(format!(
                "checkpoint line {}: expected `{}`, found `{}`",
                self.line_no, key, head
            )));
        }
        Ok(parts.collect())
    }

    fn key_u64(&mut self, key: &str) -> Result<u64> {
        let rest = self.key_line(key)?;
        rest.first()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Data(format!("checkpoint: bad `{key}` value")))
    }

    fn values<S: Scalar>(&mut self, count: usize) -> Result<Vec<S>> {
        let line = self.next()?;
        let mut out = Vec::with_capacity(count);
        for token in line.split_whitespace() {
            let v = S::parse_str(token).ok_or_else(|| {
                Error::Data(format!(
                    "checkpoint line {}: unparsable number `{token}`",
                    self.line_no
                ))
            })?;
            out.push(v);
        }
        if out.len() != count {
            return Err(Error::Data(format!(
                "checkpoint line {}: expected {} values, found {}",
                self.line_no,
                count,
                out.len()
            )));
        }
        Ok(out)
    }

    fn tensor2<S: Scalar>(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<S>> {
        let decl = self.key_line("tensor")?;
        if decl != [name, &rows.to_string(), &cols.to_string()] {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor `{}`: expected `{name} {rows} {cols}`",
                decl.join(" ")
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.values::<S>(cols)?);
        }
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Data(format!("checkpoint tensor `{name}`: {e}")))
    }

    fn tensor1<S: Scalar>(&mut self, name: &str, len: usize) -> Result<Array1<S>> {
        let decl = self.key_line("tensor")?;
        if decl != [name, &len.to_string()] {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint tensor `{}`: expected `{name} {len}`",
                decl.join(" ")
            )));
        }
        Ok(Array1::from(self.values::<S>(len)?))
    }

    fn mlp<S: Scalar>(&mut self, prefix: &str, dims: [usize; 4]) -> Result<Mlp<S>> {
        let [input, h1, h2, output] = dims;
        let w1 = self.tensor2(&format!("{prefix}.w1"), h1, input)?;
        let b1 = self.tensor1(&format!("{prefix}.b1"), h1)?;
        let w2 = self.tensor2(&format!("{prefix}.w2"), h2, h1)?;
        let b2 = self.tensor1(&format!("{prefix}.b2"), h2)?;
        let w3 = self.tensor2(&format!("{prefix}.w3"), output, h2)?;
        let b3 = self.tensor1(&format!("{prefix}.b3"), output)?;
        Mlp::from_parts([w1, w2, w3], [b1, b2, b3])
    }

    fn architecture(&mut self, key: &str) -> Result<[usize; 4]> {
        let rest = self.key_line(key)?;
        if rest.len() != 4 {
            return Err(Error::Data(format!("checkpoint: bad `{key}` line")));
        }
        let mut dims = [0usize; 4];
        for (slot, token) in dims.iter_mut().zip(rest) {
            *slot = token
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint: bad `{key}` value")))?;
        }
        Ok(dims)
    }
}

/// Reads a checkpoint written by [`save_checkpoint`], validating version,
/// declared shapes, and completeness.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let text = fs::read_to_string(path)?;
    let mut r = LineReader::new(&text);
    let header = r.next()?;
    let version: u32 = header
        .strip_prefix("decopt checkpoint format ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data("not a checkpoint file".into()))?;
    if version != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!(
            "unsupported checkpoint format {version} (this build reads {CHECKPOINT_FORMAT})"
        )));
    }
    let seed = r.key_u64("seed")?;
    let problem_dimension = r.key_u64("problem_dimension")? as usize;
    let node_count = r.key_u64("node_count")? as usize;
    let policy_dims = r.architecture("policy_architecture")?;
    let value_dims = r.architecture("value_architecture")?;
    let normalizer_count = r.key_u64("normalizer_count")?;
    let mean_net = r.mlp::<S>("policy.mean", policy_dims)?;
    let log_std = r.tensor1::<S>("policy.log_std", policy_dims[3])?;
    let value = r.mlp::<S>("value", value_dims)?;
    let norm_mean = r.tensor1::<S>("normalizer.mean", policy_dims[0])?;
    let norm_m2 = r.tensor1::<S>("normalizer.m2", policy_dims[0])?;
    let footer = r.next()?;
    if footer != "end checkpoint" {
        return Err(Error::Data("checkpoint missing end marker".into()));
    }
    Ok(Checkpoint {
        policy: GaussianPolicy::from_parts(mean_net, log_std)?,
        value,
        normalizer: Normalizer::from_parts(norm_mean, norm_m2, normalizer_count)?,
        meta: CheckpointMeta {
            seed,
            problem_dimension,
            node_count,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_state(dim: usize, seed: u64) -> Array1<f64> {
        let mut r = rng(seed);
        Array1::from_shape_fn(dim, |_| r.random_range(-1.5..1.5))
    }

    #[test]
    fn zero_weights_pass_the_output_bias_through() {
        let zero2 = |r, c| Array2::<f64>::zeros((r, c));
        let net = Mlp::from_parts(
            [zero2(4, 3), zero2(4, 4), zero2(2, 4)],
            [
                Array1::zeros(4),
                Array1::zeros(4),
                array![1.5, -2.0],
            ],
        )
        .unwrap();
        let out = net.forward(&array![0.3, -0.7, 2.0]).unwrap();
        assert_eq!(out, array![1.5, -2.0]);
    }

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        let net: Mlp<f64> = Mlp::new(3, 8, 2, &mut rng(7)).unwrap();
        let out = net.forward(&Array1::zeros(3)).unwrap();
        assert_eq!(out, Array1::<f64>::zeros(2));
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net: Mlp<f64> = Mlp::new(3, 8, 2, &mut rng(8)).unwrap();
        assert!(matches!(
            net.forward(&Array1::zeros(4)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn log_prob_matches_the_standard_normal_constant() {
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((expected - (-0.9189385332046727)).abs() < 1e-12);
        let mean = array![0.4];
        let lp = gaussian_log_prob(&mean, &Array1::zeros(1), &mean.clone());
        assert!((lp - expected).abs() < 1e-12);
        let mean3 = array![0.4, -1.0, 2.0];
        let lp3 = gaussian_log_prob(&mean3, &Array1::zeros(3), &mean3.clone());
        assert!((lp3 - 3.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn log_prob_decreases_away_from_the_mean() {
        let mean = array![1.0, -0.5];
        let log_std = array![0.2, -0.3];
        let mut last = f64::INFINITY;
        for step in 0..6 {
            let offset = 0.5 * step as f64;
            let action = &mean + offset;
            let lp = gaussian_log_prob(&mean, &log_std, &action);
            assert!(lp < last || step == 0);
            last = lp;
        }
    }

    #[test]
    fn density_integrates_to_one_in_one_dimension() {
        let net: Mlp<f64> = Mlp::new(2, 8, 1, &mut rng(21)).unwrap();
        let policy = GaussianPolicy::new(net, -0.4).unwrap();
        let state = random_state(2, 22);
        let mu = policy.mean(&state).unwrap()[0];
        let sigma = policy.log_std()[0].exp();
        let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let steps = 60_000;
        let h = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            let a = lo + h * i as f64;
            let density = policy.log_prob(&state, &array![a]).unwrap().exp();
            let weight = if i == 0 || i == steps { 0.5 } else { 1.0 };
            integral += weight * density * h;
        }
        assert!((integral - 1.0).abs() <= 1e-4, "integral {integral}");
    }

    /// Central finite difference of a scalar function of one flat vector.
    fn finite_difference(
        f: &mut dyn FnMut(&Array1<f64>) -> f64,
        at: &Array1<f64>,
    ) -> Array1<f64> {
        let eps = 1e-5;
        let mut grad = Array1::zeros(at.len());
        let mut probe = at.clone();
        for j in 0..at.len() {
            probe[j] = at[j] + eps;
            let up = f(&probe);
            probe[j] = at[j] - eps;
            let down = f(&probe);
            probe[j] = at[j];
            grad[j] = (up - down) / (2.0 * eps);
        }
        grad
    }

    fn max_relative_error(got: &Array1<f64>, want: &Array1<f64>) -> f64 {
        got.iter()
            .zip(want.iter())
            .map(|(g, w)| (g - w).abs() / w.abs().max(1e-4))
            .fold(0.0, f64::max)
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        let net: Mlp<f64> = Mlp::new(4, 6, 3, &mut rng(31)).unwrap();
        let policy = GaussianPolicy::new(net, -0.2).unwrap();
        let state = random_state(4, 32);
        let action = random_state(3, 33) * 0.8;

        let (mean, cache) = policy.mean_cached(&state).unwrap();
        let mut grads = policy.zero_grads();
        policy.accumulate_log_prob_grad(&cache, &mean, &action, 1.0, &mut grads);

        let template = policy.clone();
        let state_c = state.clone();
        let action_c = action.clone();
        let mut loss = move |flat: &Array1<f64>| {
            let mut p = template.clone();
            p.set_flat(flat).unwrap();
            p.log_prob(&state_c, &action_c).unwrap()
        };
        let fd = finite_difference(&mut loss, &policy.to_flat());
        let err = max_relative_error(&grads.to_flat(), &fd);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn value_gradients_match_finite_differences() {
        let net: Mlp<f64> = Mlp::new(5, 6, 1, &mut rng(41)).unwrap();
        let state = random_state(5, 42);
        let (_, cache) = net.forward_cached(&state).unwrap();
        let mut grads = net.zero_grads();
        net.backward(&cache, &array![1.0], &mut grads);

        let template = net.clone();
        let state_c = state.clone();
        let mut loss = move |flat: &Array1<f64>| {
            let mut n = template.clone();
            n.set_flat(flat).unwrap();
            n.forward(&state_c).unwrap()[0]
        };
        let fd = finite_difference(&mut loss, &net.to_flat());
        let err = max_relative_error(&grads.to_flat(), &fd);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn zero_loss_weight_leaves_gradients_at_zero() {
        let net: Mlp<f64> = Mlp::new(4, 6, 3, &mut rng(51)).unwrap();
        let policy = GaussianPolicy::new(net, 0.1).unwrap();
        let state = random_state(4, 52);
        let action = random_state(3, 53);
        let (mean, cache) = policy.mean_cached(&state).unwrap();
        let mut grads = policy.zero_grads();
        policy.accumulate_log_prob_grad(&cache, &mean, &action, 0.0, &mut grads);
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mean_gradient_vanishes_when_the_action_hits_the_mean() {
        let net: Mlp<f64> = Mlp::new(4, 6, 2, &mut rng(61)).unwrap();
        let policy = GaussianPolicy::new(net, -0.1).unwrap();
        let state = random_state(4, 62);
        let (mean, cache) = policy.mean_cached(&state).unwrap();
        let mut grads = policy.zero_grads();
        policy.accumulate_log_prob_grad(&cache, &mean, &mean, 1.0, &mut grads);
        assert!(grads.mean.to_flat().iter().all(|&g| g == 0.0));
        // At a = μ the only slope left is the −1 per log_std coordinate.
        assert_eq!(grads.log_std, array![-1.0, -1.0]);
    }

    #[test]
    fn sampling_reports_the_density_of_the_raw_draw() {
        let net: Mlp<f64> = Mlp::new(3, 8, 2, &mut rng(71)).unwrap();
        let policy = GaussianPolicy::new(net, -0.5).unwrap();
        let state = random_state(3, 72);
        let mut r = rng(73);
        let draw = policy.sample(&state, &mut r).unwrap();
        let direct = policy.log_prob(&state, &draw.action).unwrap();
        assert_eq!(draw.log_prob, direct);
    }

    #[test]
    fn adam_leaves_parameters_alone_on_zero_gradient() {
        let mut params = random_state(6, 81);
        let before = params.clone();
        let mut state = Adam::new(6);
        for _ in 0..5 {
            adam_step(
                &mut params,
                &Array1::zeros(6),
                &mut state,
                1e-3,
                (0.9, 0.999),
                1e-8,
            )
            .unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adam_settles_at_unit_rate_times_gradient_sign() {
        let mut params: Array1<f64> = array![0.0, 0.0];
        let grads = array![0.3, -4.0];
        let mut state = Adam::new(2);
        let lr = 1e-3;
        let mut last = params.clone();
        let mut step = Array1::zeros(2);
        for _ in 0..500 {
            adam_step(&mut params, &grads, &mut state, lr, (0.9, 0.999), 1e-8).unwrap();
            step = &params - &last;
            last = params.clone();
        }
        for j in 0..2 {
            assert!((step[j].abs() - lr).abs() < 0.05 * lr, "step {}", step[j]);
            assert!(step[j].signum() == -grads[j].signum());
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = random_state(10, 91);
            let mut state = Adam::new(10);
            for k in 0..50 {
                let grads = random_state(10, 92 + k);
                adam_step(&mut params, &grads, &mut state, 3e-4, (0.9, 0.999), 1e-8).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn running_moments_match_a_two_pass_computation() {
        let mut norm = Normalizer::<f64>::new(3);
        let mut stream = Vec::new();
        for k in 0..257 {
            let x = random_state(3, 100 + k) * 4.0;
            norm.observe(&x).unwrap();
            stream.push(x);
        }
        let n = stream.len() as f64;
        let mut mean = Array1::<f64>::zeros(3);
        for x in &stream {
            mean = mean + x;
        }
        mean = mean / n;
        let mut var = Array1::<f64>::zeros(3);
        for x in &stream {
            let d = x - &mean;
            var = var + &(&d * &d);
        }
        var = var / n;
        for j in 0..3 {
            assert!((norm.mean()[j] - mean[j]).abs() < 1e-9);
            assert!((norm.variance()[j] - var[j]).abs() < 1e-9);
            assert!(norm.variance()[j] >= 0.0);
        }
        let z = norm.normalize(&stream[0]).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalizer_is_identity_before_any_observation() {
        let norm = Normalizer::<f64>::new(2);
        let x = array![3.0, -1.0];
        assert_eq!(norm.normalize(&x).unwrap(), x);
    }

    fn sample_checkpoint(dim_in: usize, seed: u64) -> Checkpoint<f64> {
        let mut r = rng(seed);
        let policy =
            GaussianPolicy::new(Mlp::new(dim_in, 6, 3, &mut r).unwrap(), -0.3).unwrap();
        let value: Mlp<f64> = Mlp::new(dim_in, 6, 1, &mut r).unwrap();
        let mut normalizer = Normalizer::new(dim_in);
        for k in 0..17 {
            normalizer
                .observe(&(random_state(dim_in, seed + 10 + k) * 2.5))
                .unwrap();
        }
        Checkpoint {
            policy,
            value,
            normalizer,
            meta: CheckpointMeta {
                seed,
                problem_dimension: 10,
                node_count: 5,
            },
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let ck = sample_checkpoint(7, 111);
        save_checkpoint(&path, &ck.policy, &ck.value, &ck.normalizer, &ck.meta).unwrap();
        let loaded: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.policy, ck.policy);
        assert_eq!(loaded.value, ck.value);
        assert_eq!(loaded.normalizer, ck.normalizer);
        assert_eq!(loaded.meta, ck.meta);
    }

    #[test]
    fn truncated_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let ck = sample_checkpoint(7, 121);
        save_checkpoint(&path, &ck.policy, &ck.value, &ck.normalizer, &ck.meta).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn future_format_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let ck = sample_checkpoint(7, 131);
        save_checkpoint(&path, &ck.policy, &ck.value, &ck.normalizer, &ck.meta).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("format 1", "format 2", 1)).unwrap();
        match load_checkpoint::<f64>(&path) {
            Err(Error::Data(msg)) => assert!(msg.contains("unsupported")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_environment_shape_is_refused() {
        // Networks built for a 10-dimensional problem (30 state features)
        // must not drive a 9-dimensional one (27 state features).
        let ck = sample_checkpoint(30, 141);
        assert!(ck.require_compatible(30, 3).is_ok());
        match ck.require_compatible(27, 3) {
            Err(Error::ShapeMismatch(msg)) => {
                assert!(msg.contains("30"));
                assert!(msg.contains("27"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn flat_round_trip_preserves_parameters() {
        let net: Mlp<f64> = Mlp::new(4, 5, 2, &mut rng(151)).unwrap();
        let mut copy = Mlp::new(4, 5, 2, &mut rng(999)).unwrap();
        copy.set_flat(&net.to_flat()).unwrap();
        assert_eq!(copy, net);
        let policy = GaussianPolicy::new(net, -0.7).unwrap();
        let mut pcopy =
            GaussianPolicy::new(Mlp::new(4, 5, 2, &mut rng(998)).unwrap(), 0.0).unwrap();
        pcopy.set_flat(&policy.to_flat()).unwrap();
        assert_eq!(pcopy, policy);
    }
}
