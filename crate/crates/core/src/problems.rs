//! Objective classes, dataset ingestion, and problem-instance sampling.
//!
//! Each node holds a composite objective `s_i + r_i` in one of three shapes:
//! lasso-regularized least squares (smooth quadratic plus `λ‖x‖₁`),
//! `ℓ₂`-regularized logistic loss (all smooth), and lasso-regularized mean
//! absolute error (all nonsmooth). Datasets come either from UCI files or
//! from a seeded synthetic generator; instances are drawn from a sample pool
//! and later labeled with the centralized minimizer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigenvalues;
use crate::scalar::Scalar;

/// The three supported objective shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    /// `s_i = (1/m_i) Σ ½(aᵀx−b)²`, `r_i = λ‖x‖₁`.
    LeastSquaresLasso,
    /// `s_i = (1/m_i) Σ (−b·aᵀx + log(1+exp(aᵀx))) + (λ/2)‖x‖²`, `r_i = 0`.
    Logistic,
    /// `s_i = 0`, `r_i = (1/m_i) Σ |aᵀx−b| + λ‖x‖₁`.
    L1Lasso,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 3] = [
        ProblemKind::LeastSquaresLasso,
        ProblemKind::Logistic,
        ProblemKind::L1Lasso,
    ];

    /// Whether `s_i` is nonzero; when false the surrogate Hessian term drops
    /// and the per-round action loses its first coordinate.
    pub fn has_smooth_part(self) -> bool {
        !matches!(self, ProblemKind::L1Lasso)
    }

    /// Dimension of the per-round action: `(α, β, ρ)`, or `(β, ρ)` when
    /// there is no smooth part for `α` to scale.
    pub fn action_dim(self) -> usize {
        if self.has_smooth_part() {
            3
        } else {
            2
        }
    }

    /// Classification kinds constrain labels to {0, 1}.
    pub fn is_classification(self) -> bool {
        matches!(self, ProblemKind::Logistic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::LeastSquaresLasso => "least-squares-lasso",
            ProblemKind::Logistic => "logistic",
            ProblemKind::L1Lasso => "l1-lasso",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ProblemKind> {
        match s {
            "least-squares-lasso" => Ok(ProblemKind::LeastSquaresLasso),
            "logistic" => Ok(ProblemKind::Logistic),
            "l1-lasso" => Ok(ProblemKind::L1Lasso),
            other => Err(Error::Data(format!("unknown problem kind {other:?}"))),
        }
    }
}

/// One feature vector with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S: Scalar> {
    pub features: Array1<S>,
    pub label: S,
}

/// The composite objective `s_i + r_i` held by one node.
///
/// Samples are stored row-wise (`features` is `m_i × d`) so value, gradient,
/// and Hessian evaluations are matrix products.
#[derive(Debug, Clone)]
pub struct LocalObjective<S: Scalar> {
    kind: ProblemKind,
    features: Array2<S>,
    labels: Array1<S>,
    lambda: S,
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// `log(1 + exp(z))` without overflow for large `|z|`.
fn softplus<S: Scalar>(z: S) -> S {
    if z > S::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl<S: Scalar> LocalObjective<S> {
    pub fn new(kind: ProblemKind, samples: &[Sample<S>], lambda: S) -> Result<LocalObjective<S>> {
        if samples.is_empty() {
            return Err(Error::InvalidParameter(
                "a local objective needs at least one sample".into(),
            ));
        }
        if lambda < S::zero() {
            return Err(Error::InvalidParameter(
                "regularization weight must be nonnegative".into(),
            ));
        }
        let d = samples[0].features.len();
        let m = samples.len();
        let mut features = Array2::<S>::zeros((m, d));
        let mut labels = Array1::<S>::zeros(m);
        for (j, s) in samples.iter().enumerate() {
            if s.features.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "sample {j} has dimension {}, expected {d}",
                    s.features.len()
                )));
            }
            if !s.features.iter().all(|v| v.is_finite()) || !s.label.is_finite() {
                return Err(Error::Data(format!("sample {j} has non-finite entries")));
            }
            if kind.is_classification() && !(s.label == S::zero() || s.label == S::one()) {
                return Err(Error::Data(format!(
                    "classification label must be 0 or 1, got {} at sample {j}",
                    s.label
                )));
            }
            features.row_mut(j).assign(&s.features);
            labels[j] = s.label;
        }
        Ok(LocalObjective {
            kind,
            features,
            labels,
            lambda,
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn lambda(&self) -> S {
        self.lambda
    }

    pub fn sample_count(&self) -> usize {
        self.features.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.features.ncols()
    }

    /// Sample matrix, one row per sample.
    pub fn features(&self) -> &Array2<S> {
        &self.features
    }

    pub fn labels(&self) -> &Array1<S> {
        &self.labels
    }

    /// `(s_i(x), ∇s_i(x))`; identically zero for the all-nonsmooth kind.
    pub fn smooth_value_grad(&self, x: &Array1<S>) -> (S, Array1<S>) {
        let d = self.dimension();
        let inv_m = S::one() / S::c(self.sample_count() as f64);
        let half = S::c(0.5);
        match self.kind {
            ProblemKind::LeastSquaresLasso => {
                let residual = self.features.dot(x) - &self.labels;
                let value = half * inv_m * residual.dot(&residual);
                let grad = self.features.t().dot(&residual) * inv_m;
                (value, grad)
            }
            ProblemKind::Logistic => {
                let z = self.features.dot(x);
                let mut value = S::zero();
                let mut coeff = Array1::<S>::zeros(z.len());
                for j in 0..z.len() {
                    value = value - self.labels[j] * z[j] + softplus(z[j]);
                    coeff[j] = sigmoid(z[j]) - self.labels[j];
                }
                let mut grad = self.features.t().dot(&coeff) * inv_m;
                grad.scaled_add(self.lambda, x);
                (
                    value * inv_m + half * self.lambda * x.dot(x),
                    grad,
                )
            }
            ProblemKind::L1Lasso => (S::zero(), Array1::zeros(d)),
        }
    }

    /// Exact Hessian `∇²s_i(x)`; constant for least squares, zero for the
    /// all-nonsmooth kind.
    pub fn smooth_hessian(&self, x: &Array1<S>) -> Array2<S> {
        let d = self.dimension();
        let inv_m = S::one() / S::c(self.sample_count() as f64);
        match self.kind {
            ProblemKind::LeastSquaresLasso => self.features.t().dot(&self.features) * inv_m,
            ProblemKind::Logistic => {
                let z = self.features.dot(x);
                let mut weighted = self.features.clone();
                for j in 0..z.len() {
                    let s = sigmoid(z[j]);
                    let w = s * (S::one() - s);
                    weighted.row_mut(j).mapv_inplace(|v| v * w);
                }
                let mut h = self.features.t().dot(&weighted) * inv_m;
                for i in 0..d {
                    h[[i, i]] = h[[i, i]] + self.lambda;
                }
                h
            }
            ProblemKind::L1Lasso => Array2::zeros((d, d)),
        }
    }

    /// `r_i(x)`: the nonsmooth part of the composite objective.
    pub fn nonsmooth_value(&self, x: &Array1<S>) -> S {
        let l1 = x.iter().fold(S::zero(), |acc, v| acc + v.abs());
        match self.kind {
            ProblemKind::LeastSquaresLasso => self.lambda * l1,
            ProblemKind::Logistic => S::zero(),
            ProblemKind::L1Lasso => {
                let inv_m = S::one() / S::c(self.sample_count() as f64);
                let residual = self.features.dot(x) - &self.labels;
                let mae = residual.iter().fold(S::zero(), |acc, v| acc + v.abs()) * inv_m;
                mae + self.lambda * l1
            }
        }
    }

    /// `s_i(x) + r_i(x)`.
    pub fn value(&self, x: &Array1<S>) -> S {
        self.smooth_value_grad(x).0 + self.nonsmooth_value(x)
    }
}

/// Eigenvalues of a symmetric Hessian, ascending.
pub fn hessian_eigenvalues<S: Scalar>(h: &Array2<S>) -> Result<Vec<S>> {
    symmetric_eigenvalues(h)
}

/// A full network problem: one objective per node, shared dimension, and the
/// centralized minimizer once the oracle has labeled it.
#[derive(Debug, Clone)]
pub struct ProblemInstance<S: Scalar> {
    instance_id: String,
    kind: ProblemKind,
    lambda: S,
    objectives: Vec<LocalObjective<S>>,
    dimension: usize,
    x_star: Option<Array1<S>>,
}

impl<S: Scalar> ProblemInstance<S> {
    pub fn new(
        instance_id: impl Into<String>,
        objectives: Vec<LocalObjective<S>>,
    ) -> Result<ProblemInstance<S>> {
        let instance_id = instance_id.into();
        if instance_id.is_empty() || instance_id.chars().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidParameter(format!(
                "instance id {instance_id:?} must be nonempty without whitespace"
            )));
        }
        let first = objectives
            .first()
            .ok_or_else(|| Error::InvalidParameter("instance needs at least one node".into()))?;
        let kind = first.kind();
        let lambda = first.lambda();
        let dimension = first.dimension();
        for (i, obj) in objectives.iter().enumerate() {
            if obj.kind() != kind || obj.lambda() != lambda {
                return Err(Error::InvalidParameter(format!(
                    "node {i} disagrees on kind or lambda"
                )));
            }
            if obj.dimension() != dimension {
                return Err(Error::ShapeMismatch(format!(
                    "node {i} has dimension {}, expected {dimension}",
                    obj.dimension()
                )));
            }
        }
        Ok(ProblemInstance {
            instance_id,
            kind,
            lambda,
            objectives,
            dimension,
            x_star: None,
        })
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn lambda(&self) -> S {
        self.lambda
    }

    pub fn node_count(&self) -> usize {
        self.objectives.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn objective(&self, node: usize) -> &LocalObjective<S> {
        &self.objectives[node]
    }

    pub fn objectives(&self) -> &[LocalObjective<S>] {
        &self.objectives
    }

    pub fn x_star(&self) -> Option<&Array1<S>> {
        self.x_star.as_ref()
    }

    /// Ground truth or an error naming the unlabeled instance.
    pub fn require_x_star(&self) -> Result<&Array1<S>> {
        self.x_star
            .as_ref()
            .ok_or_else(|| Error::MissingGroundTruth(self.instance_id.clone()))
    }

    pub fn set_x_star(&mut self, x_star: Array1<S>) -> Result<()> {
        if x_star.len() != self.dimension {
            return Err(Error::ShapeMismatch(format!(
                "x_star has dimension {}, expected {}",
                x_star.len(),
                self.dimension
            )));
        }
        self.x_star = Some(x_star);
        Ok(())
    }

    /// `Σ_i (s_i(x) + r_i(x))` at a common point.
    pub fn full_objective(&self, x: &Array1<S>) -> S {
        self.objectives
            .iter()
            .fold(S::zero(), |acc, obj| acc + obj.value(x))
    }
}

/// Uniformly samples `total_samples` pairs from the pool without replacement
/// and splits them evenly across `node_count` nodes; deterministic per seed.
pub fn sample_instance<S: Scalar>(
    instance_id: impl Into<String>,
    pool: &[Sample<S>],
    node_count: usize,
    total_samples: usize,
    lambda: S,
    kind: ProblemKind,
    seed: u64,
) -> Result<ProblemInstance<S>> {
    if node_count == 0 {
        return Err(Error::InvalidParameter("need at least one node".into()));
    }
    if total_samples % node_count != 0 {
        return Err(Error::InvalidParameter(format!(
            "{total_samples} samples do not split evenly across {node_count} nodes"
        )));
    }
    if total_samples < node_count {
        return Err(Error::InvalidParameter(
            "every node needs at least one sample".into(),
        ));
    }
    if total_samples > pool.len() {
        return Err(Error::InvalidParameter(format!(
            "requested {total_samples} samples from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first total_samples indices become a uniform
    // draw without replacement.
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for k in 0..total_samples {
        let pick = rng.random_range(k..idx.len());
        idx.swap(k, pick);
    }
    let per_node = total_samples / node_count;
    let mut objectives = Vec::with_capacity(node_count);
    for node in 0..node_count {
        let block: Vec<Sample<S>> = idx[node * per_node..(node + 1) * per_node]
            .iter()
            .map(|&i| pool[i].clone())
            .collect();
        objectives.push(LocalObjective::new(kind, &block, lambda)?);
    }
    ProblemInstance::new(instance_id, objectives)
}

/// Supported UCI dataset layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Comma-separated: sex (M/F/I), 7 numeric attributes, rings. The sex
    /// field is one-hot encoded, giving d = 10; label = rings.
    Abalone,
    /// Comma-separated: id, 9 numeric attributes in 1..=10, class (2 benign,
    /// 4 malignant). Rows containing the `?` missing marker are dropped;
    /// d = 9; label = benign 0 / malignant 1.
    BreastCancerWisconsin,
}

/// Loads a UCI file and standardizes every feature column to zero mean and
/// unit variance over the file (constant columns are mapped to zero).
pub fn load_uci_dataset<S: Scalar>(path: &Path, kind: DatasetKind) -> Result<Vec<Sample<S>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read dataset {}: {e}", path.display())))?;
    let mut raw: Vec<(Vec<f64>, f64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parsed = match kind {
            DatasetKind::Abalone => parse_abalone_row(&fields),
            DatasetKind::BreastCancerWisconsin => match parse_breast_cancer_row(&fields) {
                Ok(None) => continue, // missing-value row
                other => other.map(|o| o.expect("non-missing row")),
            },
        };
        raw.push(parsed.map_err(|e| {
            Error::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?);
    }
    if raw.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} has no usable rows",
            path.display()
        )));
    }
    standardize_features(&mut raw);
    Ok(raw
        .into_iter()
        .map(|(f, label)| Sample {
            features: Array1::from_vec(f.into_iter().map(S::c).collect()),
            label: S::c(label),
        })
        .collect())
}

fn parse_abalone_row(fields: &[&str]) -> std::result::Result<(Vec<f64>, f64), String> {
    if fields.len() != 9 {
        return Err(format!("expected 9 fields, got {}", fields.len()));
    }
    let mut features = Vec::with_capacity(10);
    // One-hot in fixed M, F, I order.
    match fields[0] {
        "M" => features.extend([1.0, 0.0, 0.0]),
        "F" => features.extend([0.0, 1.0, 0.0]),
        "I" => features.extend([0.0, 0.0, 1.0]),
        other => return Err(format!("unknown sex code {other:?}")),
    }
    for f in &fields[1..8] {
        features.push(
            f.parse::<f64>()
                .map_err(|_| format!("non-numeric attribute {f:?}"))?,
        );
    }
    let label = fields[8]
        .parse::<f64>()
        .map_err(|_| format!("non-numeric rings field {:?}", fields[8]))?;
    Ok((features, label))
}

fn parse_breast_cancer_row(
    fields: &[&str],
) -> std::result::Result<Option<(Vec<f64>, f64)>, String> {
    if fields.len() != 11 {
        return Err(format!("expected 11 fields, got {}", fields.len()));
    }
    if fields.iter().any(|f| *f == "?") {
        return Ok(None);
    }
    let mut features = Vec::with_capacity(9);
    // Field 0 is the sample id, dropped.
    for f in &fields[1..10] {
        features.push(
            f.parse::<f64>()
                .map_err(|_| format!("non-numeric attribute {f:?}"))?,
        );
    }
    let label = match fields[10] {
        "2" => 0.0,
        "4" => 1.0,
        other => return Err(format!("unknown class code {other:?}")),
    };
    Ok(Some((features, label)))
}

fn standardize_features(rows: &mut [(Vec<f64>, f64)]) {
    let d = rows[0].0.len();
    let n = rows.len() as f64;
    for col in 0..d {
        let mean = rows.iter().map(|(f, _)| f[col]).sum::<f64>() / n;
        let var = rows.iter().map(|(f, _)| (f[col] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for (f, _) in rows.iter_mut() {
            f[col] = if std > 0.0 { (f[col] - mean) / std } else { 0.0 };
        }
    }
}

/// Seeded synthetic sample pool, used where real dataset files are not
/// required: standard-normal features, a half-sparse planted model, and
/// labels from the planted model plus noise (thresholded through a sigmoid
/// coin flip for classification).
pub fn synthetic_pool<S: Scalar>(
    kind: ProblemKind,
    count: usize,
    dimension: usize,
    seed: u64,
) -> Vec<Sample<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planted = Array1::<S>::zeros(dimension);
    for j in 0..dimension {
        // Half the coordinates are active with magnitude in [0.5, 1.5].
        if j % 2 == 0 {
            let mag: S = rng.random_range(S::c(0.5)..S::c(1.5));
            planted[j] = if rng.random::<bool>() { mag } else { -mag };
        }
    }
    let noise = S::c(0.1);
    (0..count)
        .map(|_| {
            let features =
                Array1::from_shape_fn(dimension, |_| S::standard_normal(&mut rng));
            let signal = features.dot(&planted);
            let label = if kind.is_classification() {
                let p = sigmoid(signal);
                if rng.random_range(S::zero()..S::one()) < p {
                    S::one()
                } else {
                    S::zero()
                }
            } else {
                signal + noise * S::standard_normal(&mut rng)
            };
            Sample { features, label }
        })
        .collect()
}

// --- instance file format ------------------------------------------------

/// Serializes an instance to its self-describing text form.
///
/// Layout: a version header, scalar metadata, one block per node with one
/// `label feature...` line per sample, and an optional ground-truth line.
/// All numbers use the shortest exact decimal form, so write/read is an
/// identity on the instance.
pub fn instance_to_text<S: Scalar>(inst: &ProblemInstance<S>) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "instance v1");
    let _ = writeln!(out, "id {}", inst.instance_id());
    let _ = writeln!(out, "kind {}", inst.kind());
    let _ = writeln!(out, "lambda {}", inst.lambda());
    let _ = writeln!(out, "dimension {}", inst.dimension());
    let _ = writeln!(out, "nodes {}", inst.node_count());
    for (i, obj) in inst.objectives().iter().enumerate() {
        let _ = writeln!(out, "node {} samples {}", i, obj.sample_count());
        for j in 0..obj.sample_count() {
            let _ = write!(out, "{}", obj.labels()[j]);
            for v in obj.features().row(j) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
    if let Some(xs) = inst.x_star() {
        let _ = write!(out, "x_star");
        for v in xs {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn instance_from_text<S: Scalar>(text: &str) -> Result<ProblemInstance<S>> {
    let mut lines = text.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        lines
            .next()
            .map(|(n, l)| (n + 1, l.to_string()))
            .ok_or_else(|| Error::Data(format!("instance file ended early, expected {expect}")))
    };
    let (_, header) = next_line("version header")?;
    if header.trim() != "instance v1" {
        return Err(Error::Data(format!("bad instance header {header:?}")));
    }
    let field = |line: &str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(|s| s.trim().to_string())
            .ok_or_else(|| Error::Data(format!("expected `{key} ...`, got {line:?}")))
    };
    let (_, line) = next_line("id")?;
    let id = field(&line, "id")?;
    let (_, line) = next_line("kind")?;
    let kind: ProblemKind = field(&line, "kind")?.parse()?;
    let (_, line) = next_line("lambda")?;
    let lambda = S::parse_str(&field(&line, "lambda")?)
        .ok_or_else(|| Error::Data("bad lambda value".into()))?;
    let (_, line) = next_line("dimension")?;
    let dimension: usize = field(&line, "dimension")?
        .parse()
        .map_err(|_| Error::Data("bad dimension value".into()))?;
    let (_, line) = next_line("nodes")?;
    let node_count: usize = field(&line, "nodes")?
        .parse()
        .map_err(|_| Error::Data("bad node count".into()))?;
    let mut objectives = Vec::with_capacity(node_count);
    for node in 0..node_count {
        let (lineno, line) = next_line("node block")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Data(format!("line {lineno}: expected `node {node} samples M`"));
        if parts.len() != 4 || parts[0] != "node" || parts[2] != "samples" {
            return Err(bad());
        }
        if parts[1].parse::<usize>().ok() != Some(node) {
            return Err(bad());
        }
        let m: usize = parts[3].parse().map_err(|_| bad())?;
        let mut samples = Vec::with_capacity(m);
        for _ in 0..m {
            let (lineno, line) = next_line("sample row")?;
            let mut nums = line.split_whitespace().map(S::parse_str);
            let label = nums
                .next()
                .flatten()
                .ok_or_else(|| Error::Data(format!("line {lineno}: bad sample row")))?;
            let features: Option<Vec<S>> = nums.collect();
            let features = features
                .ok_or_else(|| Error::Data(format!("line {lineno}: non-numeric feature")))?;
            if features.len() != dimension {
                return Err(Error::Data(format!(
                    "line {lineno}: {} features, expected {dimension}",
                    features.len()
                )));
            }
            samples.push(Sample {
                features: Array1::from_vec(features),
                label,
            });
        }
        objectives.push(LocalObjective::new(kind, &samples, lambda)?);
    }
    let mut inst = ProblemInstance::new(id, objectives)?;
    let (lineno, line) = next_line("x_star or end")?;
    if let Some(rest) = line.strip_prefix("x_star ") {
        let values: Option<Vec<S>> = rest.split_whitespace().map(S::parse_str).collect();
        let values =
            values.ok_or_else(|| Error::Data(format!("line {lineno}: bad x_star row")))?;
        inst.set_x_star(Array1::from_vec(values))?;
        let (_, line) = next_line("end")?;
        if line.trim() != "end" {
            return Err(Error::Data(format!("expected `end`, got {line:?}")));
        }
    } else if line.trim() != "end" {
        return Err(Error::Data(format!("expected `end`, got {line:?}")));
    }
    Ok(inst)
}

pub fn write_instance<S: Scalar>(inst: &ProblemInstance<S>, path: &Path) -> Result<()> {
    std::fs::write(path, instance_to_text(inst))?;
    Ok(())
}

pub fn read_instance<S: Scalar>(path: &Path) -> Result<ProblemInstance<S>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read instance {}: {e}", path.display())))?;
    instance_from_text(&text)
}
