//! The five commands behind the binary. Each one is a plain function over a
//! loaded [`Config`], so tests drive them directly.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};

use decopt::baselines::{run_fixed_policy, run_pg_extra, tune_fixed_policy, AlgorithmRun};
use decopt::engine::ActionTriple;
use decopt::nn::{load_checkpoint, save_checkpoint, Checkpoint};
use decopt::oracle::{certify, label_instance};
use decopt::problems::{
    sample_instance, synthetic_pool, write_instance, ProblemInstance, ProblemKind, Sample,
};
use decopt::rl::{self, EnvConfig};
use decopt::topology::Graph;
use decopt::Real;
use ndarray::Array1;

use crate::config::Config;
use crate::csvio::{write_curves_csv, write_trace_csv, TraceRecord};
use crate::manifest::{content_hash, Manifest, ManifestEntry};
use crate::seeds::{subseed, Domain};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const GRAPH_FILE: &str = "graph.txt";
const CERTIFICATION_BOUND: Real = 1e-8;

/// Effective output directory: the `--out` override or the configured one.
pub fn out_dir(config: &Config, out_override: Option<&Path>) -> PathBuf {
    out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.io.out_dir.clone())
}

fn effective_seed(config: &Config, seed_override: Option<u64>) -> u64 {
    seed_override.unwrap_or(config.problem.seed)
}

/// Parses a numeric CSV (comma or whitespace separated) whose last column is
/// the label.
fn load_dataset(path: &Path, dimension: usize, kind: ProblemKind) -> anyhow::Result<Vec<Sample<Real>>> {
    let text = std::fs::read_to_string(path).with_context(|| {
        format!(
            "dataset file `{}` not found; point [problem].data at a numeric CSV \
             or set data = \"synthetic\"",
            path.display()
        )
    })?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<Real> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(Real::from_str)
            .collect::<Result<_, _>>()
            .with_context(|| format!("{}:{}: non-numeric field", path.display(), lineno + 1))?;
        if fields.len() != dimension + 1 {
            bail!(
                "{}:{}: expected {} feature columns plus a label, found {} fields",
                path.display(),
                lineno + 1,
                dimension,
                fields.len()
            );
        }
        let label = fields[dimension];
        if kind == ProblemKind::Logistic && label != 0.0 && label != 1.0 {
            bail!(
                "{}:{}: logistic labels must be 0 or 1, found {label}",
                path.display(),
                lineno + 1
            );
        }
        samples.push(Sample {
            features: Array1::from(fields[..dimension].to_vec()),
            label,
        });
    }
    if samples.is_empty() {
        bail!("dataset `{}` holds no samples", path.display());
    }
    Ok(samples)
}

#[derive(Debug)]
pub struct GenSummary {
    pub instance_count: usize,
    pub hash: String,
    pub max_residual: Real,
}

/// Generates the graph and the train/val/test instances, labels every
/// instance with the certified centralized solver, and writes the manifest.
pub fn gen(config: &Config, seed_override: Option<u64>, out_override: Option<&Path>) -> anyhow::Result<GenSummary> {
    let seed = effective_seed(config, seed_override);
    let dir = out_dir(config, out_override);
    let instances_dir = dir.join("instances");
    std::fs::create_dir_all(&instances_dir)
        .with_context(|| format!("cannot create `{}`", instances_dir.display()))?;

    let kind = config.problem.kind;
    let graph = Graph::generate(
        config.topology.nodes,
        config.edge_count(),
        subseed(seed, Domain::Graph, 0),
    )?;
    graph.write_edge_list(&dir.join(GRAPH_FILE))?;

    let pool = if config.problem.data == "synthetic" {
        synthetic_pool(
            kind,
            config.problem.pool_size,
            config.problem.dimension,
            subseed(seed, Domain::Pool, 0),
        )
    } else {
        load_dataset(Path::new(&config.problem.data), config.problem.dimension, kind)?
    };

    let splits = [
        ("train", config.problem.train_instances),
        ("val", config.problem.val_instances),
        ("test", config.problem.test_instances),
    ];
    let mut tasks: Vec<(usize, String, String, ProblemInstance<Real>)> = Vec::new();
    for (split, count) in splits {
        for k in 0..count {
            let index = tasks.len();
            let id = format!("{}-{split}-{k:03}", kind.as_str());
            let inst = sample_instance(
                id.clone(),
                &pool,
                config.topology.nodes,
                config.topology.nodes * config.problem.samples_per_node,
                config.problem.lambda,
                kind,
                subseed(seed, Domain::Instance, index as u64),
            )?;
            tasks.push((index, split.to_string(), id, inst));
        }
    }
    if tasks.is_empty() {
        bail!("[problem] instance counts are all zero; nothing to generate");
    }

    // Labeling dominates the runtime and every task is independent, so it
    // fans out over a worker pool; each worker owns its chunk outright and
    // hands the labeled instances back through its join handle.
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(tasks.len());
    let mut buckets: Vec<Vec<_>> = (0..workers).map(|_| Vec::new()).collect();
    for (i, task) in tasks.into_iter().enumerate() {
        buckets[i % workers].push(task);
    }
    type Labeled = (usize, String, String, ProblemInstance<Real>, decopt::Result<Real>);
    let mut labeled: Vec<Labeled> = std::thread::scope(|scope| {
        let handles: Vec<_> = buckets
            .into_iter()
            .map(|bucket| {
                scope.spawn(move || {
                    bucket
                        .into_iter()
                        .map(|(index, split, id, mut inst)| {
                            let outcome = label_instance(&mut inst);
                            (index, split, id, inst, outcome)
                        })
                        .collect::<Vec<Labeled>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("labeling worker panicked"))
            .collect()
    });
    labeled.sort_by_key(|(index, ..)| *index);

    let failures: Vec<String> = labeled
        .iter()
        .filter_map(|(_, _, id, _, outcome)| {
            outcome.as_ref().err().map(|e| format!("{id}: {e}"))
        })
        .collect();
    if !failures.is_empty() {
        bail!(
            "the oracle failed on {} instance(s):\n  {}",
            failures.len(),
            failures.join("\n  ")
        );
    }

    let mut entries = Vec::with_capacity(labeled.len());
    let mut max_residual: Real = 0.0;
    for (_, split, id, inst, outcome) in &labeled {
        let residual = *outcome.as_ref().expect("failures were handled above");
        max_residual = max_residual.max(residual);
        let file = format!("instances/{id}.txt");
        write_instance(inst, &dir.join(&file))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            split: split.clone(),
            file,
            residual,
        });
    }

    let hash = content_hash(&dir, GRAPH_FILE, &entries)?;
    let manifest = Manifest {
        kind: kind.as_str().to_string(),
        seed,
        dimension: config.problem.dimension,
        node_count: config.topology.nodes,
        graph_file: GRAPH_FILE.to_string(),
        instances: entries,
        hash: hash.clone(),
    };
    manifest.write(&dir)?;

    println!(
        "generated {} labeled instances in `{}` (max certification residual {max_residual:.3e})",
        manifest.instances.len(),
        dir.display()
    );
    println!("manifest hash {hash}");
    Ok(GenSummary {
        instance_count: manifest.instances.len(),
        hash,
        max_residual,
    })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub pretrain_loss: Real,
    pub best_val_mse: Real,
    pub best_update_idx: usize,
    pub checkpoint_path: PathBuf,
}

/// Pretrains toward the baseline action, runs the policy-gradient loop, and
/// writes the validation-best checkpoint plus the learning curves.
pub fn train(config: &Config, seed_override: Option<u64>, out_override: Option<&Path>) -> anyhow::Result<TrainSummary> {
    let seed = effective_seed(config, seed_override);
    let dir = out_dir(config, out_override);
    let manifest = Manifest::read(&dir)?;
    let graph = manifest.graph(&dir)?;
    let train_set = manifest.split(&dir, "train")?;
    let val_set = manifest.split(&dir, "val")?;

    let train_cfg = config.train_config(subseed(seed, Domain::Train, 0))?;
    let output = rl::train(&train_set, &val_set, &graph, &train_cfg)?;

    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(
        &checkpoint_path,
        &output.checkpoint.policy,
        &output.checkpoint.value,
        &output.checkpoint.normalizer,
        &output.checkpoint.meta,
    )?;
    write_curves_csv(&dir.join("curves.csv"), &output.curves)?;

    println!(
        "pretrain loss {:.6}; best validation mse {:.6e} at update {}",
        output.pretrain_loss, output.best_val_mse, output.best_update_idx
    );
    println!("checkpoint written to `{}`", checkpoint_path.display());
    Ok(TrainSummary {
        pretrain_loss: output.pretrain_loss,
        best_val_mse: output.best_val_mse,
        best_update_idx: output.best_update_idx,
        checkpoint_path,
    })
}

fn load_policy(dir: &Path, checkpoint_override: Option<&Path>) -> anyhow::Result<(Checkpoint<Real>, String)> {
    let path = checkpoint_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    let checkpoint = load_checkpoint::<Real>(&path)
        .with_context(|| format!("cannot load checkpoint `{}`", path.display()))?;
    let policy_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    Ok((checkpoint, policy_id))
}

fn eval_records(
    checkpoint: &Checkpoint<Real>,
    label: &str,
    instances: &[ProblemInstance<Real>],
    graph: &Graph,
    env_cfg: &EnvConfig<Real>,
    rounds: usize,
    seed: u64,
) -> anyhow::Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (idx, inst) in instances.iter().enumerate() {
        let rows = rl::evaluate(
            checkpoint,
            inst,
            graph,
            env_cfg,
            rounds,
            subseed(seed, Domain::Eval, idx as u64),
        )?;
        for row in rows {
            records.push(TraceRecord {
                instance_id: inst.instance_id().to_string(),
                label: label.to_string(),
                iteration: row.iteration,
                mse: row.mse,
                objective_error: row.objective_error,
                consensus_error: row.consensus_error,
                alpha: row.action.alpha(),
                beta: row.action.beta(),
                rho: row.action.rho(),
            });
        }
    }
    Ok(records)
}

/// Mean of the last per-instance error in a record stream.
fn mean_final_mse(records: &[TraceRecord]) -> Real {
    let mut finals: Vec<Real> = Vec::new();
    let mut current: Option<(&str, Real)> = None;
    for r in records {
        match current {
            Some((id, _)) if id == r.instance_id => current = Some((id, r.mse)),
            Some((_, mse)) => {
                finals.push(mse);
                current = Some((&r.instance_id, r.mse));
            }
            None => current = Some((&r.instance_id, r.mse)),
        }
    }
    if let Some((_, mse)) = current {
        finals.push(mse);
    }
    if finals.is_empty() {
        return Real::INFINITY;
    }
    finals.iter().sum::<Real>() / finals.len() as Real
}

#[derive(Debug)]
pub struct EvalSummary {
    pub rows: usize,
    pub mean_final_mse: Real,
    pub csv_path: PathBuf,
}

/// Deterministic mean-action evaluation of a checkpoint over the test split.
pub fn eval(
    config: &Config,
    checkpoint_override: Option<&Path>,
    rounds_override: Option<usize>,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> anyhow::Result<EvalSummary> {
    let seed = effective_seed(config, seed_override);
    let dir = out_dir(config, out_override);
    let manifest = Manifest::read(&dir)?;
    let graph = manifest.graph(&dir)?;
    let test_set = manifest.split(&dir, "test")?;
    let (checkpoint, policy_id) = load_policy(&dir, checkpoint_override)?;
    let env_cfg = config.env_config()?;
    let rounds = rounds_override.unwrap_or(env_cfg.rounds_per_episode);

    let records = eval_records(&checkpoint, &policy_id, &test_set, &graph, &env_cfg, rounds, seed)?;
    let csv_path = dir.join("eval.csv");
    write_trace_csv(&csv_path, "policy_id", &records)?;
    let mean = mean_final_mse(&records);
    println!(
        "evaluated {} instances for {rounds} rounds; mean final mse {mean:.6e}",
        test_set.len()
    );
    println!("traces written to `{}`", csv_path.display());
    Ok(EvalSummary {
        rows: records.len(),
        mean_final_mse: mean,
        csv_path,
    })
}

fn run_records(
    run: &AlgorithmRun<Real>,
    inst: &ProblemInstance<Real>,
    label: &str,
    (alpha, beta, rho): (Real, Real, Real),
) -> Vec<TraceRecord> {
    run.rows
        .iter()
        .map(|row| TraceRecord {
            instance_id: inst.instance_id().to_string(),
            label: label.to_string(),
            iteration: row.iteration,
            mse: row.mse,
            objective_error: row.objective_error,
            consensus_error: row.consensus_error,
            alpha,
            beta,
            rho,
        })
        .collect()
}

/// Picks the consensus-baseline step size with the lowest mean final error
/// on the validation set; diverged runs score as infinite, ties keep the
/// earlier candidate.
pub fn tune_pg_extra_step(
    val_set: &[ProblemInstance<Real>],
    graph: &Graph,
    candidates: &[Real],
    iterations: usize,
    settings: &decopt::engine::SolveSettings<Real>,
) -> anyhow::Result<Real> {
    let mut best = candidates[0];
    let mut best_score = Real::INFINITY;
    for &step in candidates {
        let mut total = 0.0;
        for inst in val_set {
            let run = run_pg_extra(inst, graph, step, iterations, settings)?;
            let final_mse = match run.rows.last() {
                Some(row) if !run.diverged && row.mse.is_finite() => row.mse,
                _ => Real::INFINITY,
            };
            total += final_mse;
        }
        let score = total / val_set.len() as Real;
        if score < best_score {
            best_score = score;
            best = step;
        }
    }
    Ok(best)
}

#[derive(Debug)]
pub struct CompareSummary {
    pub learned_mse: Real,
    pub fixed_mse: Real,
    pub pg_extra_mse: Real,
    pub tuned_action: ActionTriple<Real>,
    pub tuned_step: Real,
    pub csv_path: PathBuf,
}

/// Runs the learned policy, the grid-tuned constant action, and the
/// consensus baseline over the test split into one comparison CSV.
///
/// The learned policy spends one state-forming round before acting, so the
/// other methods get `(rounds + 1) · n` iterations: every column consumes
/// the same total communication.
pub fn compare(
    config: &Config,
    checkpoint_override: Option<&Path>,
    rounds_override: Option<usize>,
    seed_override: Option<u64>,
    out_override: Option<&Path>,
) -> anyhow::Result<CompareSummary> {
    let seed = effective_seed(config, seed_override);
    let dir = out_dir(config, out_override);
    let manifest = Manifest::read(&dir)?;
    let graph = manifest.graph(&dir)?;
    let val_set = manifest.split(&dir, "val")?;
    let test_set = manifest.split(&dir, "test")?;
    let (checkpoint, _) = load_policy(&dir, checkpoint_override)?;
    let env_cfg = config.env_config()?;
    let settings = config.solve_settings();
    let rounds = rounds_override.unwrap_or(env_cfg.rounds_per_episode);
    let iterations = (rounds + 1) * env_cfg.iterations_per_round;

    let mut records = eval_records(
        &checkpoint,
        "learned",
        &test_set,
        &graph,
        &env_cfg,
        rounds,
        seed,
    )?;
    let learned_mse = mean_final_mse(&records);

    let grid = config.tuning_grid()?;
    let tuned = tune_fixed_policy(&val_set, &graph, &grid, iterations, &settings)?;
    let mut fixed_records = Vec::new();
    for inst in &test_set {
        let run = run_fixed_policy(inst, &graph, &tuned, iterations, &settings)?;
        fixed_records.extend(run_records(
            &run,
            inst,
            "fixed_tuned",
            (tuned.alpha(), tuned.beta(), tuned.rho()),
        ));
    }
    let fixed_mse = mean_final_mse(&fixed_records);
    records.extend(fixed_records);

    let step = tune_pg_extra_step(
        &val_set,
        &graph,
        &config.engine.pg_extra_steps,
        iterations,
        &settings,
    )?;
    let mut pg_records = Vec::new();
    for inst in &test_set {
        let run = run_pg_extra(inst, &graph, step, iterations, &settings)?;
        pg_records.extend(run_records(&run, inst, "pg_extra", (step, 0.0, 0.0)));
    }
    let pg_extra_mse = mean_final_mse(&pg_records);
    records.extend(pg_records);

    let csv_path = dir.join("compare.csv");
    write_trace_csv(&csv_path, "algorithm", &records)?;
    println!(
        "mean final mse: learned {learned_mse:.6e}, tuned constant {fixed_mse:.6e} \
         (α={}, β={}, ρ={}), consensus baseline {pg_extra_mse:.6e} (step {step})",
        tuned.alpha(),
        tuned.beta(),
        tuned.rho()
    );
    println!("comparison written to `{}`", csv_path.display());
    Ok(CompareSummary {
        learned_mse,
        fixed_mse,
        pg_extra_mse,
        tuned_action: tuned,
        tuned_step: step,
        csv_path,
    })
}

#[derive(Debug)]
pub struct OracleCheckSummary {
    pub checked: usize,
    pub max_residual: Real,
}

/// Re-certifies every stored optimum in the manifest against the
/// subgradient residual bound.
pub fn oracle_check(config: &Config, out_override: Option<&Path>) -> anyhow::Result<OracleCheckSummary> {
    let dir = out_dir(config, out_override);
    let manifest = Manifest::read(&dir)?;
    let mut max_residual: Real = 0.0;
    let mut violations = Vec::new();
    for entry in &manifest.instances {
        let inst: ProblemInstance<Real> =
            decopt::problems::read_instance(&manifest.entry_path(&dir, entry))?;
        let x_star = inst.require_x_star()?;
        let residual = certify(&inst, x_star);
        println!("{}: residual {residual:.3e}", entry.id);
        max_residual = max_residual.max(residual);
        if !(residual <= CERTIFICATION_BOUND) {
            violations.push(entry.id.clone());
        }
    }
    if !violations.is_empty() {
        bail!(
            "{} instance(s) exceed the certification bound {CERTIFICATION_BOUND:e}: {}",
            violations.len(),
            violations.join(", ")
        );
    }
    println!(
        "all {} stored optima certify within {CERTIFICATION_BOUND:e} (max {max_residual:.3e})",
        manifest.instances.len()
    );
    Ok(OracleCheckSummary {
        checked: manifest.instances.len(),
        max_residual,
    })
}
