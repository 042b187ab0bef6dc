//! Dense symmetric positive-definite solves shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Pivot-ratio condition estimate above which a solve is logged as ill-conditioned.
pub const WARN_CONDITION: f64 = 1e12;
/// Pivot-ratio condition estimate above which a matrix is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e14;

/// Jacobi-scaled Cholesky factorization `D·M·D = L·Lᵀ` with `D = diag(M)^{-1/2}`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
    condition_estimate: f64,
}

impl SpdFactor {
    /// Factors `m`, failing with [`Error::Unobservable`] when `m` is singular or indefinite.
    pub fn new(m: &DMatrix<f64>, what: &str) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() {
            return Err(Error::dims(format!("{what} (square)"), n, m.ncols()));
        }
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let d = m[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Unobservable(format!(
                    "{what}: diagonal entry {i} is {d:e}"
                )));
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let mut scaled = m.clone();
        for j in 0..n {
            for i in 0..n {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(scaled)
            .ok_or_else(|| Error::Unobservable(format!("{what} is not positive definite")))?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let p = l[(i, i)] * l[(i, i)];
            lo = lo.min(p);
            hi = hi.max(p);
        }
        let condition_estimate = if n == 0 { 1.0 } else { hi / lo };
        if !(condition_estimate < SINGULAR_CONDITION) {
            return Err(Error::Unobservable(format!(
                "{what} is numerically singular (condition estimate {condition_estimate:.3e})"
            )));
        }
        if condition_estimate > WARN_CONDITION {
            log::warn!("{what} is ill-conditioned (condition estimate {condition_estimate:.3e})");
        }
        Ok(SpdFactor {
            chol,
            scale,
            condition_estimate,
        })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Lower bound on the condition number of the scaled matrix.
    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.component_mul(&self.scale);
        self.chol.solve_mut(&mut y);
        y.component_mul_assign(&self.scale);
        y
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = b.clone();
        for j in 0..y.ncols() {
            for i in 0..y.nrows() {
                y[(i, j)] *= self.scale[i];
            }
        }
        self.chol.solve_mut(&mut y);
        for j in 0..y.ncols() {
            for i in 0..y.nrows() {
                y[(i, j)] *= self.scale[i];
            }
        }
        y
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        let n = self.dim();
        let mut out = inv;
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] *= self.scale[i] * self.scale[j];
            }
        }
        out
    }
}

/// Spectral condition number of a symmetric matrix (ratio of extreme |eigenvalues|).
pub fn symmetric_condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &e in eig.eigenvalues.iter() {
        lo = lo.min(e.abs());
        hi = hi.max(e.abs());
    }
    hi / lo
}

/// Returns `true` when the matrix is exactly positive-definite up to the singularity guard.
pub fn is_nonsingular_spd(m: &DMatrix<f64>) -> bool {
    SpdFactor::new(m, "probe").is_ok()
}

/// Symmetrizes in place: `m ← (m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}
