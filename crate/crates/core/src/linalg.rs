//! Dense kernels for small matrices.
//!
//! Everything here works on `nalgebra` dynamic matrices of modest size
//! (d up to a few dozen). The only eigensolver is a cyclic Jacobi sweep for
//! symmetric input; stability of a non-symmetric drift matrix is decided by
//! solving its Lyapunov equation and testing the solution for definiteness.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Jacobi stops once the off-diagonal Frobenius mass drops below this
/// fraction of the input's Frobenius norm.
pub const JACOBI_REL_TOL: f64 = 1e-13;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Absolute asymmetry tolerated by the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues of P at or below this are treated as non-positive.
pub const DEFINITENESS_TOL: f64 = 1e-12;

/// Relative pivot threshold below which the vectorized Lyapunov system is
/// declared singular.
pub const PIVOT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is empty")]
    Empty,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max |M - M^T| = {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("linear system is numerically singular (pivot {pivot:e})")]
    SingularSystem { pivot: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("Jacobi iteration did not converge in {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

fn check_square(m: &DMatrix<f64>) -> Result<usize, LinalgError> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(LinalgError::Empty);
    }
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(m.nrows())
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Full eigendecomposition of a symmetric matrix. Eigenvalues are sorted
/// ascending and `vectors` holds the matching unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigensolver.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen, LinalgError> {
    let n = check_square(m)?;
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }

    let mut a = (m + m.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let threshold = JACOBI_REL_TOL * a.norm();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= threshold {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate_columns(&mut a, p, q, c, s);
                rotate_rows(&mut a, p, q, c, s);
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.nrows() {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
}

fn rotate_rows(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.ncols() {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes_symmetric(m: &DMatrix<f64>) -> Result<(f64, f64), LinalgError> {
    let eig = symmetric_eigen(m)?;
    let n = eig.values.len();
    Ok((eig.values[0], eig.values[n - 1]))
}

/// Induced 2-norm (largest singular value), via the eigenvalues of `MᵀM`.
pub fn induced_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = m.transpose() * m;
    match eig_extremes_symmetric(&gram) {
        Ok((_, top)) => top.max(0.0).sqrt(),
        // Non-finite input: propagate as infinity.
        Err(_) => f64::INFINITY,
    }
}

/// Symmetric positive-definite square root S with `S S = P`.
pub fn symmetric_sqrt(p: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let eig = symmetric_eigen(p)?;
    let lo = eig.values[0];
    if lo <= DEFINITENESS_TOL {
        return Err(LinalgError::NotPositiveDefinite { min_eigenvalue: lo });
    }
    let roots = DMatrix::from_diagonal(&eig.values.map(f64::sqrt));
    let s = &eig.vectors * roots * eig.vectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Solve `M x = rhs` by Gaussian elimination with partial pivoting.
///
/// A pivot smaller than `PIVOT_REL_TOL * max|M|` is reported as
/// [`LinalgError::SingularSystem`].
pub fn solve_gaussian(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    let n = check_square(m)?;
    assert_eq!(rhs.len(), n, "right-hand side length mismatch");
    let mut a = m.clone();
    let mut x = rhs.clone();
    let scale = a.amax().max(f64::MIN_POSITIVE);

    for col in 0..n {
        let (pivot_row, pivot_abs) = (col..n)
            .map(|r| (r, a[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs <= PIVOT_REL_TOL * scale {
            return Err(LinalgError::SingularSystem { pivot: pivot_abs });
        }
        if pivot_row != col {
            a.swap_rows(pivot_row, col);
            x.swap_rows(pivot_row, col);
        }
        let pivot = a[(col, col)];
        for r in (col + 1)..n {
            let factor = a[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            a[(r, col)] = 0.0;
            for c in (col + 1)..n {
                a[(r, c)] -= factor * a[(col, c)];
            }
            x[r] -= factor * x[col];
        }
    }
    for r in (0..n).rev() {
        let mut acc = x[r];
        for c in (r + 1)..n {
            acc -= a[(r, c)] * x[c];
        }
        x[r] = acc / a[(r, r)];
    }
    Ok(x)
}

/// Solution of `ĀᵀP + PĀ = −I` together with its definiteness verdict.
#[derive(Debug, Clone)]
pub struct LyapunovCertificate {
    pub a_bar: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub hurwitz: bool,
    /// Frobenius norm of `ĀᵀP + PĀ + I` for the symmetrized P.
    pub residual: f64,
    /// Set when the vectorized system was singular; P is zero in that case.
    pub singular_pivot: Option<f64>,
}

impl LyapunovCertificate {
    /// `θᵀ P θ`
    pub fn quadratic_form(&self, theta: &DVector<f64>) -> f64 {
        theta.dot(&(&self.p * theta))
    }
}

pub fn lyapunov_residual(a_bar: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let n = a_bar.nrows();
    (a_bar.transpose() * p + p * a_bar + DMatrix::<f64>::identity(n, n)).norm()
}

/// Solve the Lyapunov equation for `a_bar` through its d²×d² vectorized form.
///
/// The unknown `P[i][j]` sits at index `i*d + j`; row `(i, j)` of the system
/// collects `Σ_k Ā[k][i] P[k][j] + Σ_k P[i][k] Ā[k][j] = −δ_ij`.
/// A singular system (eigenvalues of Ā summing to zero) is not an error: the
/// certificate comes back with `hurwitz = false` and `singular_pivot` set.
pub fn solve_lyapunov(a_bar: &DMatrix<f64>) -> Result<LyapunovCertificate, LinalgError> {
    let d = check_square(a_bar)?;
    let dd = d * d;
    let mut system = DMatrix::<f64>::zeros(dd, dd);
    let mut rhs = DVector::<f64>::zeros(dd);
    for i in 0..d {
        for j in 0..d {
            let row = i * d + j;
            for k in 0..d {
                system[(row, k * d + j)] += a_bar[(k, i)];
                system[(row, i * d + k)] += a_bar[(k, j)];
            }
            if i == j {
                rhs[row] = -1.0;
            }
        }
    }

    let vec_p = match solve_gaussian(&system, &rhs) {
        Ok(v) => v,
        Err(LinalgError::SingularSystem { pivot }) => {
            return Ok(LyapunovCertificate {
                a_bar: a_bar.clone(),
                p: DMatrix::zeros(d, d),
                gamma_min: 0.0,
                gamma_max: 0.0,
                hurwitz: false,
                residual: f64::NAN,
                singular_pivot: Some(pivot),
            })
        }
        Err(e) => return Err(e),
    };

    let raw = DMatrix::from_row_slice(d, d, vec_p.as_slice());
    let p = (&raw + raw.transpose()) * 0.5;
    let (gamma_min, gamma_max) = eig_extremes_symmetric(&p)?;
    Ok(LyapunovCertificate {
        residual: lyapunov_residual(a_bar, &p),
        a_bar: a_bar.clone(),
        p,
        gamma_min,
        gamma_max,
        hurwitz: gamma_min > DEFINITENESS_TOL,
        singular_pivot: None,
    })
}

/// Symmetric part `(M + Mᵀ)/2`.
pub fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}
