//! Per-node subproblem solvers with certified optimality residuals.
//!
//! Every solver returns a residual measured directly on its output: the
//! Euclidean distance from the negative smooth gradient to the
//! subdifferential of the nonsmooth part. Absolute-value terms within
//! [`KINK_TOL`] of their kink contribute their full subgradient interval, so
//! residuals are meaningful at tolerances far below the data scale.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, solve_spd, symmetric_eigenvalues};
use crate::problems::{LocalObjective, ProblemKind};
use crate::scalar::Scalar;

/// Width of the band around an absolute-value kink inside which the full
/// subgradient interval is admissible when measuring residuals.
///
/// Solutions certified under this convention solve a problem whose kink
/// locations are perturbed by at most this much, so it bounds the positional
/// slack of a certified answer; it sits well above the rounding floor of the
/// residual evaluation (~1e-16 at unit scale) and well below every tolerance
/// used by callers.
pub const KINK_TOL: f64 = 1e-12;

/// The quadratic part `½xᵀMx + linearᵀx` of a per-node subproblem.
#[derive(Debug, Clone)]
pub struct QuadraticTerm<S: Scalar> {
    /// Symmetric positive definite curvature matrix.
    pub m: Array2<S>,
    /// Linear coefficient.
    pub linear: Array1<S>,
}

/// A solved subproblem: the minimizer, its certified residual, and the inner
/// iteration count. `dual` carries the multiplier vector of the nonsmooth
/// solver so the next solve at the same node can warm-start.
#[derive(Debug, Clone)]
pub struct SubproblemResult<S: Scalar> {
    pub x: Array1<S>,
    pub residual: S,
    pub inner_iterations: usize,
    pub dual: Option<Array1<S>>,
}

/// Componentwise `sign(v)·max(|v|−t, 0)`.
pub fn soft_threshold<S: Scalar>(v: &Array1<S>, t: S) -> Array1<S> {
    v.mapv(|x| soft_threshold_scalar(x, t))
}

pub fn soft_threshold_scalar<S: Scalar>(v: S, t: S) -> S {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        S::zero()
    }
}

/// Distance from `-grad` to `λ·∂‖x‖₁`, the optimality residual of
/// `min smooth(x) + λ‖x‖₁` at `x` with `grad = ∇smooth(x)`.
///
/// Coordinates split: where `x_j ≠ 0` the subgradient is the point
/// `λ·sign(x_j)`; where `x_j = 0` it is the interval `[−λ, λ]`.
pub fn lasso_residual<S: Scalar>(grad: &Array1<S>, x: &Array1<S>, lambda: S) -> S {
    let mut acc = S::zero();
    for j in 0..x.len() {
        let d = if x[j] != S::zero() {
            (grad[j] + lambda * x[j].signum()).abs()
        } else {
            (grad[j].abs() - lambda).max(S::zero())
        };
        acc = acc + d * d;
    }
    acc.sqrt()
}

/// Minimizes `½xᵀMx + linearᵀx` by Cholesky factorization.
pub fn solve_smooth<S: Scalar>(q: &QuadraticTerm<S>) -> Result<SubproblemResult<S>> {
    let l = cholesky(&q.m)?;
    let x = cholesky_solve(&l, &q.linear.mapv(|v| -v));
    let residual = (q.m.dot(&x) + &q.linear).mapv(|v| v * v).sum().sqrt();
    Ok(SubproblemResult {
        x,
        residual,
        inner_iterations: 0,
        dual: None,
    })
}

fn nonconverged<S: Scalar>(context: &str, residual: S, iterations: usize, best: &Array1<S>) -> Error {
    Error::Nonconverged {
        context: context.into(),
        residual: residual.to_f64().unwrap_or(f64::NAN),
        iterations,
        best: best.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
    }
}

/// Minimizes `½xᵀMx + linearᵀx + λ‖x‖₁` by accelerated proximal gradient
/// with step `1/λ_max(M)` and monotone restarts.
///
/// A momentum step whose objective would rise is discarded and retaken as a
/// plain proximal-gradient step, so accepted objective values never
/// increase. Stops when [`lasso_residual`] at the iterate is at most `tol`.
pub fn solve_lasso_quadratic<S: Scalar>(
    q: &QuadraticTerm<S>,
    lambda: S,
    tol: S,
    max_inner: usize,
    warm: Option<&Array1<S>>,
) -> Result<SubproblemResult<S>> {
    solve_lasso_quadratic_traced(q, lambda, tol, max_inner, warm, |_, _, _| {})
}

/// [`solve_lasso_quadratic`] with a per-accepted-iterate trace callback
/// `(iteration, objective, restarted)`.
pub fn solve_lasso_quadratic_traced<S: Scalar>(
    q: &QuadraticTerm<S>,
    lambda: S,
    tol: S,
    max_inner: usize,
    warm: Option<&Array1<S>>,
    mut trace: impl FnMut(usize, S, bool),
) -> Result<SubproblemResult<S>> {
    let d = q.linear.len();
    if lambda < S::zero() {
        return Err(Error::InvalidParameter("negative lasso weight".into()));
    }
    let eig = symmetric_eigenvalues(&q.m)?;
    let lip = *eig.last().expect("nonempty spectrum");
    if !(lip > S::zero()) || eig[0] < -S::c(1e-10) * lip.max(S::one()) {
        return Err(Error::NotPositiveDefinite(
            "lasso subproblem needs a positive definite quadratic".into(),
        ));
    }
    let step = S::one() / lip;
    let objective = |x: &Array1<S>| -> S {
        let half = S::c(0.5);
        half * x.dot(&q.m.dot(x))
            + q.linear.dot(x)
            + lambda * x.iter().fold(S::zero(), |a, v| a + v.abs())
    };
    let mut x = warm.cloned().unwrap_or_else(|| Array1::zeros(d));
    let mut z = x.clone();
    let mut t = S::one();
    let mut f_prev = objective(&x);
    let mut residual = lasso_residual(&(q.m.dot(&x) + &q.linear), &x, lambda);
    if residual <= tol {
        return Ok(SubproblemResult {
            x,
            residual,
            inner_iterations: 0,
            dual: None,
        });
    }
    // A step taken from z == x carries no momentum; such steps cannot raise
    // the objective (beyond rounding) and are always accepted, which keeps
    // the restart path from livelocking at the numerical floor.
    let mut momentum_free = true;
    for k in 0..max_inner {
        let grad_z = q.m.dot(&z) + &q.linear;
        let x_new = soft_threshold(&(&z - &(grad_z * step)), step * lambda);
        let f_new = objective(&x_new);
        if f_new > f_prev && !momentum_free {
            // Monotone restart: drop this momentum step and retake it as a
            // plain proximal-gradient step from the last accepted iterate.
            z = x.clone();
            t = S::one();
            momentum_free = true;
            trace(k + 1, f_prev, true);
            continue;
        }
        residual = lasso_residual(&(q.m.dot(&x_new) + &q.linear), &x_new, lambda);
        trace(k + 1, f_new, false);
        if residual <= tol {
            return Ok(SubproblemResult {
                x: x_new,
                residual,
                inner_iterations: k + 1,
                dual: None,
            });
        }
        let t_next = (S::one() + (S::one() + S::c(4.0) * t * t).sqrt()) * S::c(0.5);
        let coef = (t - S::one()) / t_next;
        z = &x_new + &((&x_new - &x) * coef);
        momentum_free = coef == S::zero();
        t = t_next;
        x = x_new;
        f_prev = f_new.min(f_prev);
    }
    Err(nonconverged("lasso subproblem", residual, max_inner, &x))
}

/// Primal point induced by a dual vector `y` for the all-nonsmooth
/// subproblem: `x(y) = soft((−Aᵀy − linear)/β, λ/β)`.
///
/// By construction `βx + linear + Aᵀy + λv = 0` for some `v ∈ ∂‖x‖₁`, so the
/// only optimality gap left is on the dual side.
fn nonsmooth_primal<S: Scalar>(
    beta: S,
    linear: &Array1<S>,
    features: &Array2<S>,
    lambda: S,
    y: &Array1<S>,
) -> Array1<S> {
    let w = (features.t().dot(y) + linear).mapv(|v| -v / beta);
    soft_threshold(&w, lambda / beta)
}

/// Residual of the dual-feasibility selection at `(x, y)`: replaces `y_j` by
/// a valid subgradient of `(1/m)|a_jᵀx − b_j|` wherever the sample is away
/// from its kink, and measures the lasso residual of the resulting gradient.
/// Any admissible selection upper-bounds the true subgradient distance.
fn nonsmooth_dual_residual<S: Scalar>(
    beta: S,
    linear: &Array1<S>,
    obj: &LocalObjective<S>,
    x: &Array1<S>,
    y: &Array1<S>,
) -> S {
    let kink = S::c(KINK_TOL);
    let inv_m = S::one() / S::c(obj.sample_count() as f64);
    let z = obj.features().dot(x) - obj.labels();
    let y_sel = Array1::from_shape_fn(z.len(), |j| {
        if z[j].abs() > kink {
            inv_m * z[j].signum()
        } else {
            y[j]
        }
    });
    let grad = obj.features().t().dot(&y_sel) + &(x * beta) + linear;
    lasso_residual(&grad, x, obj.lambda())
}

/// Minimizes `(β/2)‖x‖² + linearᵀx + (1/m)Σ|a_jᵀx−b_j| + λ‖x‖₁`.
///
/// Runs accelerated projected gradient on the box-constrained dual (the
/// conjugate of the scaled-absolute-error term is linear on `‖y‖∞ ≤ 1/m`),
/// recovering the primal through [`nonsmooth_primal`]. Projection lands
/// saturated multipliers exactly on the box boundary, which is what lets the
/// residual reach tolerances near machine precision.
pub fn solve_nonsmooth<S: Scalar>(
    beta: S,
    linear: &Array1<S>,
    obj: &LocalObjective<S>,
    tol: S,
    max_inner: usize,
    warm_dual: Option<&Array1<S>>,
) -> Result<SubproblemResult<S>> {
    if obj.kind() != ProblemKind::L1Lasso {
        return Err(Error::InvalidParameter(format!(
            "nonsmooth solver expects the all-nonsmooth kind, got {}",
            obj.kind()
        )));
    }
    if !(beta > S::zero()) {
        return Err(Error::InvalidParameter(
            "nonsmooth subproblem needs beta > 0".into(),
        ));
    }
    let features = obj.features();
    let m = obj.sample_count();
    let lambda = obj.lambda();
    let bound = S::one() / S::c(m as f64);
    let clamp = |y: &mut Array1<S>| {
        y.mapv_inplace(|v| v.max(-bound).min(bound));
    };
    // Dual objective phi(y) = bᵀy + f*(−Aᵀy); its gradient is b − A·x(y)
    // with Lipschitz constant λ_max(AᵀA)/β.
    let gram = features.t().dot(features);
    let lip = *symmetric_eigenvalues(&gram)?.last().expect("nonempty") / beta;
    let step = if lip > S::zero() {
        S::one() / lip
    } else {
        S::one()
    };
    let phi = |y: &Array1<S>| -> S {
        let x = nonsmooth_primal(beta, linear, features, lambda, y);
        // Negated dual: bᵀy + f*(−Aᵀy) with f*(w) = wᵀx − f(x) at the
        // maximizing x; f already carries the linear term.
        let w = features.t().dot(y).mapv(|v| -v);
        let fx = S::c(0.5) * beta * x.dot(&x)
            + linear.dot(&x)
            + lambda * x.iter().fold(S::zero(), |a, v| a + v.abs());
        obj.labels().dot(y) + w.dot(&x) - fx
    };
    let mut y = warm_dual
        .filter(|w| w.len() == m)
        .cloned()
        .unwrap_or_else(|| Array1::zeros(m));
    clamp(&mut y);
    let mut v = y.clone();
    let mut t = S::one();
    let mut f_prev = phi(&y);
    let mut x = nonsmooth_primal(beta, linear, features, lambda, &y);
    let mut residual = nonsmooth_dual_residual(beta, linear, obj, &x, &y);
    if residual <= tol {
        return Ok(SubproblemResult {
            x,
            residual,
            inner_iterations: 0,
            dual: Some(y),
        });
    }
    // Same monotone-restart discipline as the lasso solver: momentum-free
    // steps are always accepted. Every `POLISH_EVERY` iterations the active
    // pattern implied by the current dual is finished off exactly, which is
    // what lets samples sitting on their kink certify in finite time.
    const POLISH_EVERY: usize = 50;
    let mut momentum_free = true;
    for k in 0..max_inner {
        let xv = nonsmooth_primal(beta, linear, features, lambda, &v);
        let grad = obj.labels() - &features.dot(&xv);
        let mut y_new = &v - &(grad * step);
        clamp(&mut y_new);
        let f_new = phi(&y_new);
        if f_new > f_prev && !momentum_free {
            v = y.clone();
            t = S::one();
            momentum_free = true;
            continue;
        }
        x = nonsmooth_primal(beta, linear, features, lambda, &y_new);
        residual = nonsmooth_dual_residual(beta, linear, obj, &x, &y_new);
        if residual <= tol {
            return Ok(SubproblemResult {
                x,
                residual,
                inner_iterations: k + 1,
                dual: Some(y_new),
            });
        }
        if (k + 1) % POLISH_EVERY == 0 {
            if let Some((x_pol, y_pol, res_pol)) =
                polish_nonsmooth(beta, linear, obj, &y_new, tol)
            {
                if res_pol <= tol {
                    return Ok(SubproblemResult {
                        x: x_pol,
                        residual: res_pol,
                        inner_iterations: k + 1,
                        dual: Some(y_pol),
                    });
                }
            }
        }
        let t_next = (S::one() + (S::one() + S::c(4.0) * t * t).sqrt()) * S::c(0.5);
        let coef = (t - S::one()) / t_next;
        v = &y_new + &((&y_new - &y) * coef);
        clamp(&mut v);
        momentum_free = coef == S::zero();
        t = t_next;
        y = y_new;
        f_prev = f_new.min(f_prev);
    }
    Err(nonconverged("nonsmooth subproblem", residual, max_inner, &x))
}

/// Exact finish of the piece selected by the current dual: holds the
/// saturated multipliers and the soft-threshold support fixed, solves the
/// piece's stationarity equations for the interior multipliers, and verifies
/// the result. Returns a candidate only when its certified residual beats
/// plain iteration; the caller re-checks against the tolerance.
fn polish_nonsmooth<S: Scalar>(
    beta: S,
    linear: &Array1<S>,
    obj: &LocalObjective<S>,
    y: &Array1<S>,
    tol: S,
) -> Option<(Array1<S>, Array1<S>, S)> {
    let features = obj.features();
    let lambda = obj.lambda();
    let m = obj.sample_count();
    let bound = S::one() / S::c(m as f64);
    let x = nonsmooth_primal(beta, linear, features, lambda, y);
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] != S::zero()).collect();
    let interior: Vec<usize> = (0..m).filter(|&j| y[j].abs() < bound).collect();
    if support.is_empty() || interior.is_empty() {
        return None;
    }
    // On the piece, x_F = −(A_Fᵀ y + c_F + λ s_F)/β and interior optimality
    // pins A_{I,F} x_F = b_I, giving an SPD system in y_I.
    let b_mat = Array2::from_shape_fn((interior.len(), support.len()), |(r, c)| {
        features[[interior[r], support[c]]]
    });
    // Fixed part of −β x_F: contributions of saturated duals, the linear
    // term, and the sign vector.
    let mut fixed = Array1::from_shape_fn(support.len(), |c| {
        let i = support[c];
        linear[i] + lambda * x[i].signum()
    });
    for j in 0..m {
        if y[j].abs() >= bound {
            for (c, &i) in support.iter().enumerate() {
                fixed[c] = fixed[c] + features[[j, i]] * y[j];
            }
        }
    }
    let rhs = Array1::from_shape_fn(interior.len(), |r| {
        -beta * obj.labels()[interior[r]] - b_mat.row(r).dot(&fixed)
    });
    let gram = b_mat.dot(&b_mat.t());
    let y_interior = solve_spd(&gram, &rhs).ok()?;
    if y_interior.iter().any(|v| v.abs() > bound) {
        return None;
    }
    let mut y_pol = y.clone();
    for (r, &j) in interior.iter().enumerate() {
        y_pol[j] = y_interior[r];
    }
    let x_pol = nonsmooth_primal(beta, linear, features, lambda, &y_pol);
    let res = nonsmooth_dual_residual(beta, linear, obj, &x_pol, &y_pol);
    if res.is_finite() && res <= tol {
        Some((x_pol, y_pol, res))
    } else {
        None
    }
}

/// Solver-independent optimality residual for the all-nonsmooth subproblem
/// at a candidate `x`.
///
/// Minimizes `‖βx + linear + Σ u_j a_j + v‖` over every admissible
/// subgradient selection: `u_j` ranges over `[−1/m, 1/m]` for samples within
/// [`KINK_TOL`] of their kink (fixed at `±1/m` otherwise) and `v_j` over
/// `[−λ, λ]` where `x_j = 0` (fixed at `λ·sign(x_j)` otherwise). The
/// minimization is cyclic coordinate descent on the box-constrained
/// least-squares problem; any feasible point upper-bounds the true distance,
/// so the reported value is a certificate even before full convergence.
pub fn nonsmooth_residual<S: Scalar>(
    beta: S,
    linear: &Array1<S>,
    obj: &LocalObjective<S>,
    x: &Array1<S>,
) -> S {
    let inv_m = S::one() / S::c(obj.sample_count() as f64);
    let rows: Vec<(Array1<S>, S)> = (0..obj.sample_count())
        .map(|j| (obj.features().row(j).to_owned(), inv_m))
        .collect();
    let base = x * beta + linear;
    weighted_l1_residual(base, &rows, obj.labels(), obj.lambda(), x)
}

/// Distance from `−base` to the subdifferential of
/// `Σ_j w_j·|a_jᵀx − b_j| + λ‖x‖₁` at `x`, where `rows` holds `(a_j, w_j)`.
///
/// Minimizes `‖base + Σ u_j a_j + v‖` over every admissible subgradient
/// selection: `u_j` ranges over `[−w_j, w_j]` for samples within [`KINK_TOL`]
/// of their kink (fixed at `±w_j` otherwise) and `v_j` over `[−λ, λ]` where
/// `x_j = 0` (fixed at `λ·sign(x_j)` otherwise). Any feasible point
/// upper-bounds the true distance, so the reported value is a certificate
/// even before full convergence.
pub fn weighted_l1_residual<S: Scalar>(
    base: Array1<S>,
    rows: &[(Array1<S>, S)],
    labels: &Array1<S>,
    lambda: S,
    x: &Array1<S>,
) -> S {
    let kink = S::c(KINK_TOL);
    let d = x.len();
    // Fixed part of the gradient selection; rows of samples at their kink
    // stay free with multiplier box [−w_j, w_j].
    let mut base = base;
    let mut kink_rows: Vec<(Array1<S>, S)> = Vec::new();
    for (j, (row, weight)) in rows.iter().enumerate() {
        let z = row.dot(x) - labels[j];
        if z.abs() > kink {
            base.scaled_add(*weight * z.signum(), row);
        } else {
            kink_rows.push((row.clone(), *weight));
        }
    }
    for j in 0..d {
        if x[j] != S::zero() {
            base[j] = base[j] + lambda * x[j].signum();
        }
    }
    // The l1-interval multipliers enter through the identity, so minimizing
    // over them shrinks each zero coordinate by λ: the objective in the kink
    // multipliers u alone is h(u) = ‖g(base + Σ u_j a_j)‖² with g applying
    // soft-thresholding on the zero set and the identity elsewhere.
    let shrunk = |w: &Array1<S>| -> Array1<S> {
        Array1::from_shape_fn(d, |j| {
            if x[j] == S::zero() {
                soft_threshold_scalar(w[j], lambda)
            } else {
                w[j]
            }
        })
    };
    if kink_rows.is_empty() {
        return shrunk(&base).mapv(|v| v * v).sum().sqrt();
    }
    // Projected gradient with monotone restarts over the multiplier box;
    // ∇h(u) = 2·A_K·g(w) and |g'| ≤ 1 bounds the Lipschitz constant by
    // 2·λ_max(A_K A_Kᵀ). Any feasible u upper-bounds the true distance.
    let k_count = kink_rows.len();
    let gram = Array2::from_shape_fn((k_count, k_count), |(i, j)| {
        kink_rows[i].0.dot(&kink_rows[j].0)
    });
    let lip = S::c(2.0)
        * symmetric_eigenvalues(&gram)
            .expect("finite gram")
            .last()
            .copied()
            .unwrap_or(S::one())
            .max(S::c(1e-30));
    let step = S::one() / lip;
    let w_of = |u: &Array1<S>| -> Array1<S> {
        let mut w = base.clone();
        for (j, (row, _)) in kink_rows.iter().enumerate() {
            w.scaled_add(u[j], row);
        }
        w
    };
    let h_of = |u: &Array1<S>| -> S { shrunk(&w_of(u)).mapv(|v| v * v).sum() };
    let clamp = |u: &mut Array1<S>| {
        for (j, (_, bound)) in kink_rows.iter().enumerate() {
            u[j] = u[j].max(-*bound).min(*bound);
        }
    };
    let mut u = Array1::<S>::zeros(k_count);
    let mut v = u.clone();
    let mut t = S::one();
    let mut h_prev = h_of(&u);
    let mut momentum_free = true;
    for _ in 0..2000 {
        let g = shrunk(&w_of(&v));
        let grad = Array1::from_shape_fn(k_count, |j| S::c(2.0) * kink_rows[j].0.dot(&g));
        let mut u_new = &v - &(grad * step);
        clamp(&mut u_new);
        let h_new = h_of(&u_new);
        if h_new > h_prev && !momentum_free {
            v = u.clone();
            t = S::one();
            momentum_free = true;
            continue;
        }
        let t_next = (S::one() + (S::one() + S::c(4.0) * t * t).sqrt()) * S::c(0.5);
        let coef = (t - S::one()) / t_next;
        v = &u_new + &((&u_new - &u) * coef);
        clamp(&mut v);
        momentum_free = coef == S::zero();
        t = t_next;
        u = u_new;
        h_prev = h_new.min(h_prev);
    }
    h_prev.max(S::zero()).sqrt()
}
