//! Centralized reference solvers and ground-truth labeling.
//!
//! Solves `min_x Σ_i (s_i(x) + r_i(x))` over a single variable to label
//! instances with `x*`, and certifies any candidate through a
//! solver-independent subgradient residual. Labels are trusted because of the
//! certificate, not because of the solver that produced them.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, symmetric_eigenvalues};
use crate::problems::{read_instance, write_instance, ProblemInstance, ProblemKind};
use crate::prox::{lasso_residual, soft_threshold, weighted_l1_residual, KINK_TOL};
use crate::scalar::Scalar;

/// Default subgradient-residual tolerance for ground-truth labels.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default iteration cap for the centralized solvers.
pub const DEFAULT_MAX_ITER: usize = 200_000;

/// Aggregate ℓ1 weight of `Σ_i r_i`: every node contributes `λ‖x‖₁` except
/// for the kind that folds its regularizer into the smooth term.
fn total_l1_weight<S: Scalar>(inst: &ProblemInstance<S>) -> S {
    match inst.kind() {
        ProblemKind::Logistic => S::zero(),
        _ => S::c(inst.node_count() as f64) * inst.lambda(),
    }
}

fn total_smooth_grad<S: Scalar>(inst: &ProblemInstance<S>, x: &Array1<S>) -> (S, Array1<S>) {
    let mut value = S::zero();
    let mut grad = Array1::<S>::zeros(inst.dimension());
    for obj in inst.objectives() {
        let (v, g) = obj.smooth_value_grad(x);
        value = value + v;
        grad = grad + &g;
    }
    (value, grad)
}

/// Stacked data rows of the all-nonsmooth kind with their per-sample weights
/// `1/m_i` and labels.
fn stacked_rows<S: Scalar>(
    inst: &ProblemInstance<S>,
) -> (Vec<(Array1<S>, S)>, Array1<S>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for obj in inst.objectives() {
        let weight = S::one() / S::c(obj.sample_count() as f64);
        for j in 0..obj.sample_count() {
            rows.push((obj.features().row(j).to_owned(), weight));
            labels.push(obj.labels()[j]);
        }
    }
    (rows, Array1::from(labels))
}

/// Solver-independent optimality residual
/// `dist(−Σ_i ∇s_i(x), ∂Σ_i r_i(x))` at a candidate `x`.
pub fn certify<S: Scalar>(inst: &ProblemInstance<S>, x: &Array1<S>) -> S {
    let lambda_total = total_l1_weight(inst);
    match inst.kind() {
        ProblemKind::L1Lasso => {
            let (rows, labels) = stacked_rows(inst);
            weighted_l1_residual(
                Array1::zeros(inst.dimension()),
                &rows,
                &labels,
                lambda_total,
                x,
            )
        }
        _ => {
            let (_, grad) = total_smooth_grad(inst, x);
            lasso_residual(&grad, x, lambda_total)
        }
    }
}

/// Minimizes the instance objective over a single centralized variable.
///
/// Accelerated proximal gradient for the kinds with a smooth term;
/// primal-dual splitting with periodic exact piece polish for the
/// all-nonsmooth kind. Returns `(x_star, kkt_residual)` once the certified
/// residual drops to `tol`.
pub fn solve_centralized<S: Scalar>(
    inst: &ProblemInstance<S>,
    tol: S,
    max_iter: usize,
) -> Result<(Array1<S>, S)> {
    match inst.kind() {
        ProblemKind::L1Lasso => solve_centralized_nonsmooth(inst, tol, max_iter),
        _ => solve_centralized_composite(inst, tol, max_iter),
    }
}

/// [`solve_centralized`] at the default tolerance and iteration budget.
pub fn solve_centralized_default<S: Scalar>(
    inst: &ProblemInstance<S>,
) -> Result<(Array1<S>, S)> {
    solve_centralized(inst, S::c(DEFAULT_TOL), DEFAULT_MAX_ITER)
}

fn solve_centralized_composite<S: Scalar>(
    inst: &ProblemInstance<S>,
    tol: S,
    max_iter: usize,
) -> Result<(Array1<S>, S)> {
    let d = inst.dimension();
    let lambda_total = total_l1_weight(inst);
    // Curvature bound: constant Hessian for the quadratic kind, the global
    // σ(1−σ) ≤ ¼ envelope plus ridge for the logistic kind.
    let mut bound = Array2::<S>::zeros((d, d));
    let origin = Array1::<S>::zeros(d);
    for obj in inst.objectives() {
        match inst.kind() {
            ProblemKind::LeastSquaresLasso => bound = bound + &obj.smooth_hessian(&origin),
            _ => {
                let scale = S::c(0.25) / S::c(obj.sample_count() as f64);
                bound = bound + &(obj.features().t().dot(obj.features()) * scale);
                for k in 0..d {
                    bound[[k, k]] = bound[[k, k]] + obj.lambda();
                }
            }
        }
    }
    let lip = symmetric_eigenvalues(&bound)?
        .last()
        .copied()
        .unwrap_or(S::one())
        .max(S::c(1e-30));
    let step = S::one() / lip;

    let composite = |x: &Array1<S>| -> S {
        let (v, _) = total_smooth_grad(inst, x);
        v + lambda_total * x.iter().fold(S::zero(), |a, b| a + b.abs())
    };
    let mut x = Array1::<S>::zeros(d);
    let mut v = x.clone();
    let mut t = S::one();
    let mut f_prev = composite(&x);
    let mut residual = {
        let (_, g) = total_smooth_grad(inst, &x);
        lasso_residual(&g, &x, lambda_total)
    };
    if residual <= tol {
        return Ok((x, residual));
    }
    let mut momentum_free = true;
    for _ in 0..max_iter {
        let (_, grad_v) = total_smooth_grad(inst, &v);
        let x_new = soft_threshold(&(&v - &(grad_v * step)), step * lambda_total);
        let f_new = composite(&x_new);
        if f_new > f_prev && !momentum_free {
            v = x.clone();
            t = S::one();
            momentum_free = true;
            continue;
        }
        let (_, grad_new) = total_smooth_grad(inst, &x_new);
        residual = lasso_residual(&grad_new, &x_new, lambda_total);
        if residual <= tol {
            return Ok((x_new, residual));
        }
        let t_next = (S::one() + (S::one() + S::c(4.0) * t * t).sqrt()) * S::c(0.5);
        let coef = (t - S::one()) / t_next;
        v = &x_new + &((&x_new - &x) * coef);
        momentum_free = coef == S::zero();
        t = t_next;
        x = x_new;
        f_prev = f_new.min(f_prev);
    }
    Err(Error::Nonconverged {
        context: "centralized proximal gradient".into(),
        residual: residual.to_f64().unwrap_or(f64::NAN),
        iterations: max_iter,
        best: x.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
    })
}

fn solve_centralized_nonsmooth<S: Scalar>(
    inst: &ProblemInstance<S>,
    tol: S,
    max_iter: usize,
) -> Result<(Array1<S>, S)> {
    let d = inst.dimension();
    let (rows, labels) = stacked_rows(inst);
    let m_total = rows.len();
    let lambda_total = total_l1_weight(inst);
    let features = Array2::from_shape_fn((m_total, d), |(j, k)| rows[j].0[k]);
    let gram = features.t().dot(&features);
    let norm_k = symmetric_eigenvalues(&gram)?
        .last()
        .copied()
        .unwrap_or(S::one())
        .max(S::c(1e-30))
        .sqrt();
    let step = S::c(0.99) / norm_k;

    // Primal-dual iteration: y ascends the dual of the weighted absolute
    // error term over its box, x descends through the ℓ1 proximal map.
    let mut x = Array1::<S>::zeros(d);
    let mut x_bar = x.clone();
    let mut y = Array1::<S>::zeros(m_total);
    let mut best = x.clone();
    let mut best_residual = cheap_selection_residual(&rows, &labels, lambda_total, &x, &y);
    if best_residual <= tol {
        return Ok((best, best_residual));
    }
    const POLISH_EVERY: usize = 50;
    for k in 0..max_iter {
        let mut y_next = &y + &(features.dot(&x_bar) * step);
        for (j, (_, w)) in rows.iter().enumerate() {
            y_next[j] = (y_next[j] - step * labels[j]).max(-*w).min(*w);
        }
        let x_next = soft_threshold(
            &(&x - &(features.t().dot(&y_next) * step)),
            step * lambda_total,
        );
        x_bar = &x_next * S::c(2.0) - &x;
        x = x_next;
        y = y_next;
        let residual = cheap_selection_residual(&rows, &labels, lambda_total, &x, &y);
        if residual < best_residual {
            best_residual = residual;
            best = x.clone();
        }
        if residual <= tol {
            return Ok((x, residual));
        }
        if (k + 1) % POLISH_EVERY == 0 {
            if let Some(x_pol) = polish_nonsmooth_instance(&rows, &labels, &x, &y) {
                let res = weighted_l1_residual(
                    Array1::zeros(d),
                    &rows,
                    &labels,
                    lambda_total,
                    &x_pol,
                );
                if res <= tol {
                    return Ok((x_pol, res));
                }
                if res < best_residual {
                    best_residual = res;
                    best = x_pol;
                }
            }
        }
    }
    Err(Error::Nonconverged {
        context: "centralized primal-dual splitting".into(),
        residual: best_residual.to_f64().unwrap_or(f64::NAN),
        iterations: max_iter,
        best: best.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
    })
}

/// Upper bound on the certified residual using the running dual as the
/// multiplier for every sample at its kink: no inner minimization, so it is
/// cheap enough to evaluate every iteration.
fn cheap_selection_residual<S: Scalar>(
    rows: &[(Array1<S>, S)],
    labels: &Array1<S>,
    lambda_total: S,
    x: &Array1<S>,
    y: &Array1<S>,
) -> S {
    let kink = S::c(KINK_TOL);
    let mut grad = Array1::<S>::zeros(x.len());
    for (j, (row, w)) in rows.iter().enumerate() {
        let z = row.dot(x) - labels[j];
        let u = if z.abs() > kink {
            *w * z.signum()
        } else {
            y[j].max(-*w).min(*w)
        };
        grad.scaled_add(u, row);
    }
    lasso_residual(&grad, x, lambda_total)
}

/// Exact finish of the piece selected by the current primal-dual pair: fixes
/// the sample set with interior multipliers and the support of `x`, then
/// solves the interpolation and stationarity equations of that piece in the
/// least-squares sense. The caller certifies the candidate independently.
fn polish_nonsmooth_instance<S: Scalar>(
    rows: &[(Array1<S>, S)],
    labels: &Array1<S>,
    x: &Array1<S>,
    y: &Array1<S>,
) -> Option<Array1<S>> {
    let d = x.len();
    let support: Vec<usize> = (0..d).filter(|&i| x[i] != S::zero()).collect();
    let interior: Vec<usize> = (0..rows.len()).filter(|&j| y[j].abs() < rows[j].1).collect();
    if support.is_empty() || interior.is_empty() {
        return None;
    }
    // Interpolation: a_jᵀ x = b_j on the kink set, x zero off the support.
    let k = interior.len();
    let f = support.len();
    let a_kf = Array2::from_shape_fn((k, f), |(r, c)| rows[interior[r]].0[support[c]]);
    let rhs = Array1::from_shape_fn(k, |r| labels[interior[r]]);
    let gram = a_kf.t().dot(&a_kf);
    let x_f = solve_spd(&gram, &a_kf.t().dot(&rhs)).ok()?;
    let mut x_pol = Array1::<S>::zeros(d);
    for (c, &i) in support.iter().enumerate() {
        x_pol[i] = x_f[c];
    }
    if x_pol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(x_pol)
}

/// Reference second method: plain proximal subgradient descent with a
/// diminishing step, returning the best-objective iterate. Slow but
/// structurally unrelated to the accelerated solvers, which is the point.
pub fn proximal_subgradient<S: Scalar>(
    inst: &ProblemInstance<S>,
    iterations: usize,
) -> Array1<S> {
    let d = inst.dimension();
    let lambda_total = total_l1_weight(inst);
    let mut x = Array1::<S>::zeros(d);
    let mut best = x.clone();
    let mut best_value = inst.full_objective(&x);
    // Scale-free initial step from the subgradient magnitude at the origin.
    let g0 = subgradient(inst, &x);
    let scale = g0.dot(&g0).sqrt().max(S::one());
    let t0 = S::one() / scale;
    for k in 0..iterations {
        let g = subgradient(inst, &x);
        let t = t0 / S::c((k + 1) as f64).sqrt();
        x = soft_threshold(&(&x - &(g * t)), t * lambda_total);
        let value = inst.full_objective(&x);
        if value < best_value {
            best_value = value;
            best = x.clone();
        }
    }
    best
}

fn subgradient<S: Scalar>(inst: &ProblemInstance<S>, x: &Array1<S>) -> Array1<S> {
    match inst.kind() {
        ProblemKind::L1Lasso => {
            let (rows, labels) = stacked_rows(inst);
            let mut g = Array1::<S>::zeros(x.len());
            for (j, (row, w)) in rows.iter().enumerate() {
                let z = row.dot(x) - labels[j];
                if z != S::zero() {
                    g.scaled_add(*w * z.signum(), row);
                }
            }
            g
        }
        _ => total_smooth_grad(inst, x).1,
    }
}

/// Solves the instance at the default tolerance and stores the label;
/// returns the certified residual.
pub fn label_instance<S: Scalar>(inst: &mut ProblemInstance<S>) -> Result<S> {
    let (x_star, _) = solve_centralized_default(inst)?;
    let residual = certify(inst, &x_star);
    inst.set_x_star(x_star)?;
    Ok(residual)
}

/// Labels the instance stored at `path` in place.
pub fn label_instance_file<S: Scalar>(path: &Path) -> Result<S> {
    let mut inst: ProblemInstance<S> = read_instance(path)?;
    let residual = label_instance(&mut inst)?;
    write_instance(&inst, path)?;
    Ok(residual)
}

/// 1-D brute-force minimizer over a wide bracket: coarse scan followed by
/// ternary refinement. Testing aid for scalar instances.
pub fn grid_minimize_1d<S: Scalar>(
    objective: impl Fn(S) -> S,
    lo: S,
    hi: S,
    coarse_steps: usize,
) -> S {
    let mut best_arg = lo;
    let mut best_val = objective(lo);
    let span = hi - lo;
    for i in 1..=coarse_steps {
        let arg = lo + span * S::c(i as f64) / S::c(coarse_steps as f64);
        let val = objective(arg);
        if val < best_val {
            best_val = val;
            best_arg = arg;
        }
    }
    let width = span / S::c(coarse_steps as f64);
    let mut a = best_arg - width;
    let mut b = best_arg + width;
    for _ in 0..200 {
        let third = (b - a) / S::c(3.0);
        let m1 = a + third;
        let m2 = b - third;
        if objective(m1) <= objective(m2) {
            b = m2;
        } else {
            a = m1;
        }
    }
    (a + b) * S::c(0.5)
}
