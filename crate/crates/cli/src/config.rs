//! Run configuration: one TOML file with a section per concern. Every field
//! has a default, and unknown keys are rejected by name so typos surface
//! instead of silently falling back.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use decopt::engine::{ActionTriple, SolveSettings};
use decopt::problems::ProblemKind;
use decopt::rl::{EnvConfig, PpoConfig, RewardShaping, TrainConfig};
use decopt::Real;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub topology: TopologySection,
    pub problem: ProblemSection,
    pub engine: EngineSection,
    pub policy: PolicySection,
    pub ppo: PpoSection,
    pub io: IoSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    pub nodes: usize,
    /// Edges beyond the spanning tree; total edge count is `nodes − 1 + extra_edges`.
    pub extra_edges: usize,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            nodes: 10,
            extra_edges: 3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub dimension: usize,
    /// `"synthetic"` or a path to a numeric CSV whose last column is the label.
    pub data: String,
    /// Sample-pool size when generating synthetic data.
    pub pool_size: usize,
    /// Per-instance sample budget, as samples per node.
    pub samples_per_node: usize,
    pub lambda: Real,
    pub train_instances: usize,
    pub val_instances: usize,
    pub test_instances: usize,
    /// Master seed; `--seed` overrides it.
    pub seed: u64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            kind: ProblemKind::LeastSquaresLasso,
            dimension: 8,
            data: "synthetic".into(),
            pool_size: 400,
            samples_per_node: 2,
            lambda: 0.05,
            train_instances: 100,
            val_instances: 10,
            test_instances: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub iterations_per_round: usize,
    pub rounds_per_episode: usize,
    pub tol: Real,
    pub max_inner: usize,
    pub abort_threshold: Real,
    pub abort_penalty: Real,
    pub reward: RewardShaping,
    /// `(α, β, ρ)` of the pretraining target and the state-forming round.
    pub baseline: [Real; 3],
    /// Grid axes for tuning the constant-action comparison.
    pub tune_alphas: Vec<Real>,
    pub tune_betas: Vec<Real>,
    pub tune_rhos: Vec<Real>,
    /// Step-size candidates for the consensus baseline.
    pub pg_extra_steps: Vec<Real>,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            iterations_per_round: 10,
            rounds_per_episode: 10,
            tol: 1e-10,
            max_inner: 5000,
            abort_threshold: 1e6,
            abort_penalty: -100.0,
            reward: RewardShaping::Log,
            baseline: [5.0, 5.0, 5.0],
            tune_alphas: vec![0.0, 1.0, 5.0],
            tune_betas: vec![1.0, 5.0, 10.0],
            tune_rhos: vec![0.1, 1.0, 5.0],
            pg_extra_steps: vec![0.003, 0.01, 0.03, 0.1, 0.3, 1.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub hidden: usize,
    pub initial_log_std: Real,
    pub pretrain_states: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: Real,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            hidden: 64,
            initial_log_std: 0.0,
            pretrain_states: 256,
            pretrain_epochs: 1500,
            pretrain_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoSection {
    pub gamma: Real,
    pub gae_lambda: Real,
    pub clip: Real,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: Real,
    pub value_lr: Real,
    pub entropy_coef: Real,
    pub value_coef: Real,
    pub updates: usize,
    pub episodes_per_update: usize,
    pub eval_interval: usize,
}

impl Default for PpoSection {
    fn default() -> Self {
        PpoSection {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 64,
            lr: 3e-4,
            value_lr: 1e-2,
            entropy_coef: 0.0,
            value_coef: 0.5,
            updates: 50,
            episodes_per_update: 8,
            eval_interval: 1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file `{}`", path.display()))?;
        let config: Config = toml::from_str(&text)
            .with_context(|| format!("invalid config `{}`", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.topology.nodes == 0 {
            bail!("[topology] nodes must be at least 1");
        }
        if self.problem.dimension == 0 {
            bail!("[problem] dimension must be at least 1");
        }
        if self.problem.samples_per_node == 0 {
            bail!("[problem] samples_per_node must be at least 1");
        }
        if !(self.problem.lambda >= 0.0) {
            bail!("[problem] lambda must be nonnegative");
        }
        if self.engine.iterations_per_round == 0 || self.engine.rounds_per_episode == 0 {
            bail!("[engine] iterations_per_round and rounds_per_episode must be at least 1");
        }
        if self.engine.tune_alphas.is_empty()
            || self.engine.tune_betas.is_empty()
            || self.engine.tune_rhos.is_empty()
        {
            bail!("[engine] tuning grid axes must be nonempty");
        }
        if self.engine.pg_extra_steps.is_empty() {
            bail!("[engine] pg_extra_steps must be nonempty");
        }
        Ok(())
    }

    pub fn edge_count(&self) -> usize {
        self.topology.nodes.saturating_sub(1) + self.topology.extra_edges
    }

    pub fn baseline_action(&self) -> anyhow::Result<ActionTriple<Real>> {
        let [a, b, r] = self.engine.baseline;
        ActionTriple::new(a, b, r).context("[engine] baseline is not a valid action")
    }

    pub fn env_config(&self) -> anyhow::Result<EnvConfig<Real>> {
        let cfg = EnvConfig {
            rounds_per_episode: self.engine.rounds_per_episode,
            iterations_per_round: self.engine.iterations_per_round,
            baseline: self.baseline_action()?,
            abort_threshold: self.engine.abort_threshold,
            abort_penalty: self.engine.abort_penalty,
            shaping: self.engine.reward,
            solve: self.solve_settings(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn solve_settings(&self) -> SolveSettings<Real> {
        SolveSettings {
            tol: self.engine.tol,
            max_inner: self.engine.max_inner,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig<Real> {
        PpoConfig {
            gamma: self.ppo.gamma,
            gae_lambda: self.ppo.gae_lambda,
            clip_eps: self.ppo.clip,
            epochs: self.ppo.epochs,
            minibatch: self.ppo.minibatch,
            lr: self.ppo.lr,
            value_lr: self.ppo.value_lr,
            entropy_coef: self.ppo.entropy_coef,
            value_coef: self.ppo.value_coef,
        }
    }

    pub fn train_config(&self, seed: u64) -> anyhow::Result<TrainConfig<Real>> {
        Ok(TrainConfig {
            env: self.env_config()?,
            ppo: self.ppo_config(),
            updates: self.ppo.updates,
            episodes_per_update: self.ppo.episodes_per_update,
            eval_interval: self.ppo.eval_interval,
            pretrain_states: self.policy.pretrain_states,
            pretrain_epochs: self.policy.pretrain_epochs,
            pretrain_lr: self.policy.pretrain_lr,
            hidden: self.policy.hidden,
            initial_log_std: self.policy.initial_log_std,
            seed,
        })
    }

    /// Constant-action tuning grid; the curvature axis collapses for the
    /// kind without a smooth part.
    pub fn tuning_grid(&self) -> anyhow::Result<Vec<ActionTriple<Real>>> {
        let alphas: &[Real] = if self.problem.kind.has_smooth_part() {
            &self.engine.tune_alphas
        } else {
            &[0.0]
        };
        let mut grid = Vec::new();
        for &a in alphas {
            for &b in &self.engine.tune_betas {
                for &r in &self.engine.tune_rhos {
                    grid.push(
                        ActionTriple::new(a, b, r)
                            .context("[engine] tuning grid holds an invalid action")?,
                    );
                }
            }
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn an_empty_file_yields_the_defaults() {
        let config: Config = toml::from_str("").unwrap();
        assert_eq!(config.topology.nodes, 10);
        assert_eq!(config.ppo.minibatch, 64);
        assert_eq!(config.problem.data, "synthetic");
        config.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = toml::from_str::<Config>("[engine]\nitterations = 3\n").unwrap_err();
        assert!(err.to_string().contains("itterations"), "{err}");
    }

    #[test]
    fn sections_override_individual_fields() {
        let config: Config =
            toml::from_str("[problem]\nkind = \"l1-lasso\"\ndimension = 3\n[ppo]\nlr = 0.001\n")
                .unwrap();
        assert_eq!(config.problem.kind, ProblemKind::L1Lasso);
        assert_eq!(config.problem.dimension, 3);
        assert_eq!(config.ppo.lr, 1e-3);
        assert_eq!(config.ppo.gamma, 0.99);
    }

    #[test]
    fn the_nonsmooth_kind_collapses_the_curvature_axis() {
        let config: Config = toml::from_str("[problem]\nkind = \"l1-lasso\"\n").unwrap();
        let grid = config.tuning_grid().unwrap();
        assert_eq!(grid.len(), 9);
        assert!(grid.iter().all(|a| a.alpha() == 0.0));
        let smooth: Config = toml::from_str("").unwrap();
        assert_eq!(smooth.tuning_grid().unwrap().len(), 27);
    }

    #[test]
    fn reward_shaping_parses_both_variants() {
        let raw: Config = toml::from_str("[engine]\nreward = \"raw\"\n").unwrap();
        assert_eq!(raw.engine.reward, RewardShaping::Raw);
        let log: Config = toml::from_str("[engine]\nreward = \"log\"\n").unwrap();
        assert_eq!(log.engine.reward, RewardShaping::Log);
    }
}
