//! Dense symmetric linear algebra kernels.
//!
//! The matrices in this crate are small (node count or feature dimension),
//! so a cyclic Jacobi sweep for eigenvalues and an unblocked Cholesky for
//! SPD solves are both fast enough and dependency-free.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Eigenvalues of a symmetric matrix, ascending.
///
/// Cyclic Jacobi on a working copy: rotations zero one off-diagonal pair at a
/// time and the diagonal converges to the spectrum. Quadratic convergence
/// kicks in after the first few sweeps; 50 sweeps is far beyond what any
/// matrix here needs, so hitting the cap indicates a non-symmetric or
/// non-finite input.
pub fn symmetric_eigenvalues<S: Scalar>(matrix: &Array2<S>) -> Result<Vec<S>> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "eigenvalues need a square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut a = matrix.clone();
    // Tolerance is relative to the Frobenius norm; below it the diagonal is
    // the spectrum to machine precision.
    let fro = a.iter().map(|&v| v * v).fold(S::zero(), |acc, v| acc + v).sqrt();
    if !fro.is_finite() {
        return Err(Error::InvalidParameter(
            "eigenvalue input has non-finite entries".into(),
        ));
    }
    let tol = S::epsilon() * fro.max(S::one());
    for _sweep in 0..50 {
        let mut off = S::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off = off + a[[p, q]] * a[[p, q]];
            }
        }
        if (off + off).sqrt() <= tol {
            let mut eig: Vec<S> = (0..n).map(|i| a[[i, i]]).collect();
            eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
            return Ok(eig);
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == S::zero() {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                // Stable rotation choice: |t| <= 1 keeps c close to 1.
                let theta = (aqq - app) / (apq + apq);
                let root = (theta * theta + S::one()).sqrt();
                let t = if theta >= S::zero() {
                    S::one() / (theta + root)
                } else {
                    -S::one() / (root - theta)
                };
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                a[[p, p]] = app - t * apq;
                a[[q, q]] = aqq + t * apq;
                a[[p, q]] = S::zero();
                a[[q, p]] = S::zero();
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[p, k]] = a[[k, p]];
                    a[[k, q]] = s * akp + c * akq;
                    a[[q, k]] = a[[k, q]];
                }
            }
        }
    }
    Err(Error::InvalidParameter(
        "jacobi eigenvalue iteration did not converge; input likely not symmetric".into(),
    ))
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
///
/// Fails if the input is not positive definite (a pivot falls below a small
/// multiple of machine epsilon times the largest diagonal entry).
pub fn cholesky<S: Scalar>(matrix: &Array2<S>) -> Result<Array2<S>> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    let max_diag = (0..n)
        .map(|i| matrix[[i, i]])
        .fold(S::zero(), |acc, v| acc.max(v));
    let floor = S::epsilon() * max_diag.max(S::one()) * S::c(n.max(1) as f64);
    let mut l = Array2::<S>::zeros((n, n));
    for j in 0..n {
        let mut diag = matrix[[j, j]];
        for k in 0..j {
            diag = diag - l[[j, k]] * l[[j, k]];
        }
        if !(diag > floor) {
            return Err(Error::NotPositiveDefinite(format!(
                "pivot {diag:?} at column {j}"
            )));
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut v = matrix[[i, j]];
            for k in 0..j {
                v = v - l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / ljj;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve<S: Scalar>(l: &Array2<S>, b: &Array1<S>) -> Array1<S> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let mut x = b.clone();
    // Forward: L y = b.
    for i in 0..n {
        let mut v = x[i];
        for k in 0..i {
            v = v - l[[i, k]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    // Backward: Lᵀ x = y.
    for i in (0..n).rev() {
        let mut v = x[i];
        for k in (i + 1)..n {
            v = v - l[[k, i]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    x
}

/// Solves the SPD system `A x = b` by Cholesky factorization.
pub fn solve_spd<S: Scalar>(matrix: &Array2<S>, b: &Array1<S>) -> Result<Array1<S>> {
    let l = cholesky(matrix)?;
    Ok(cholesky_solve(&l, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        a
    }

    #[test]
    fn eigenvalues_of_2x2_match_closed_form() {
        let a = array![[2.0_f64, 1.0], [1.0, 3.0]];
        // Roots of l^2 - 5l + 5.
        let disc = (5.0_f64 * 5.0 - 4.0 * 5.0).sqrt();
        let expect = [(5.0 - disc) / 2.0, (5.0 + disc) / 2.0];
        let eig = symmetric_eigenvalues(&a).unwrap();
        assert!((eig[0] - expect[0]).abs() < 1e-12);
        assert!((eig[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_of_diagonal_are_sorted_entries() {
        let a = array![[3.0_f64, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 2.0]];
        let eig = symmetric_eigenvalues(&a).unwrap();
        assert_eq!(eig, vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn eigenvalues_work_in_f32() {
        let a = array![[2.0_f32, 1.0], [1.0, 3.0]];
        let eig = symmetric_eigenvalues(&a).unwrap();
        let disc = (5.0_f32 * 5.0 - 4.0 * 5.0).sqrt();
        assert!((eig[0] - (5.0 - disc) / 2.0).abs() < 1e-5);
        assert!((eig[1] - (5.0 + disc) / 2.0).abs() < 1e-5);
    }

    #[test]
    fn cholesky_reconstructs_and_solves() {
        let a = random_symmetric(6, 7);
        // a a^T + I is SPD.
        let spd = a.dot(&a.t()) + Array2::<f64>::eye(6);
        let l = cholesky(&spd).unwrap();
        let recon = l.dot(&l.t());
        for (u, v) in spd.iter().zip(recon.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
        let x_true = Array1::from_vec((0..6).map(|i| i as f64 - 2.5).collect());
        let b = spd.dot(&x_true);
        let x = solve_spd(&spd, &b).unwrap();
        for (u, v) in x.iter().zip(x_true.iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0_f64, 2.0], [2.0, 1.0]];
        assert!(matches!(
            cholesky(&a),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    proptest! {
        // Spectrum invariants: eigenvalue sum matches the trace, and shifted
        // Gram matrices are certified positive definite by their smallest
        // eigenvalue.
        #[test]
        fn eigenvalue_sum_matches_trace(seed in 0u64..200, n in 1usize..8) {
            let a = random_symmetric(n, seed);
            let eig = symmetric_eigenvalues(&a).unwrap();
            let trace: f64 = (0..n).map(|i| a[[i, i]]).sum();
            let sum: f64 = eig.iter().sum();
            prop_assert!((trace - sum).abs() < 1e-10 * (1.0 + trace.abs()));
        }

        #[test]
        fn gram_plus_identity_has_spectrum_above_one(seed in 0u64..200, n in 1usize..8) {
            let a = random_symmetric(n, seed);
            let spd = a.dot(&a.t()) + Array2::<f64>::eye(n);
            let eig = symmetric_eigenvalues(&spd).unwrap();
            prop_assert!(eig[0] >= 1.0 - 1e-10);
            prop_assert!(cholesky(&spd).is_ok());
        }
    }
}
