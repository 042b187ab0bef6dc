//! Per-PMU update of `γ = [cos Δθ; sin Δθ]` on the unit circle.

use nalgebra::{DMatrix, DVector, DVectorView, Matrix2, SymmetricEigen, Vector2};

use super::quartic::quartic_roots;
use crate::error::{Error, Result};

/// `A` such that `A·[cos θ; sin θ] = Γ(θ)·(H v)`, built from `hv = H v`.
pub fn build_a_matrix(hv: DVectorView<'_, f64>) -> DMatrix<f64> {
    let m = hv.len();
    let mut a = DMatrix::zeros(m, 2);
    for p in 0..m / 2 {
        let (x, y) = (hv[2 * p], hv[2 * p + 1]);
        a[(2 * p, 0)] = x;
        a[(2 * p, 1)] = -y;
        a[(2 * p + 1, 0)] = y;
        a[(2 * p + 1, 1)] = x;
    }
    a
}

/// A unit-circle γ together with the multiplier that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSolution {
    pub gamma: Vector2<f64>,
    pub lambda: f64,
}

impl GammaSolution {
    pub fn angle(&self) -> f64 {
        self.gamma[1].atan2(self.gamma[0])
    }
}

/// Bus term of the objective up to a constant: `γᵀKγ − 2rᵀγ`.
fn reduced_objective(k: &Matrix2<f64>, r: &Vector2<f64>, g: &Vector2<f64>) -> f64 {
    (g.transpose() * k * g)[0] - 2.0 * r.dot(g)
}

/// `K = AᵀWA` and `r = AᵀWz`.
pub fn normal_terms(a: &DMatrix<f64>, w: &DMatrix<f64>, z: DVectorView<'_, f64>) -> (Matrix2<f64>, Vector2<f64>) {
    let wa = w * a;
    let k = a.tr_mul(&wa);
    let r = wa.tr_mul(&z);
    (
        Matrix2::new(k[(0, 0)], k[(0, 1)], k[(1, 0)], k[(1, 1)]),
        Vector2::new(r[0], r[1]),
    )
}

/// `g(λ) = Σ u_i² / (ξ_i + λ)²`.
pub fn secular(xi: &Vector2<f64>, u: &Vector2<f64>, lambda: f64) -> f64 {
    (0..2).map(|i| (u[i] / (xi[i] + lambda)).powi(2)).sum()
}

/// Minimizes `(z − Aγ)ᵀW(z − Aγ)` subject to `‖γ‖ = 1` for a general covariance.
pub fn update_gamma_general(
    a: &DMatrix<f64>,
    w: &DMatrix<f64>,
    z: DVectorView<'_, f64>,
) -> Result<GammaSolution> {
    let (k, r) = normal_terms(a, w, z);
    solve_trust_circle(&k, &r)
}

/// Solves `min γᵀKγ − 2rᵀγ` on the unit circle for symmetric PSD `K`.
pub fn solve_trust_circle(k: &Matrix2<f64>, r: &Vector2<f64>) -> Result<GammaSolution> {
    let sym = 0.5 * (k + k.transpose());
    let eig = SymmetricEigen::new(sym);
    let q = eig.eigenvectors;
    let xi = eig.eigenvalues;
    let u = q.transpose() * r;

    let s = xi.amax().max(u.amax());
    if !(u.amax() > 1e-14 * xi.amax().max(1e-300)) || s == 0.0 {
        return Err(Error::Degenerate(format!(
            "AᵀWz vanishes (|u| = {:.3e}); the attack angle is unidentifiable",
            u.norm()
        )));
    }

    // Clear denominators: (λ+ξ1)²(λ+ξ2)² − u1²(λ+ξ2)² − u2²(λ+ξ1)² = 0, in μ = λ/s.
    let (a1, a2) = (xi[0] / s, xi[1] / s);
    let (b1, b2) = ((u[0] / s).powi(2), (u[1] / s).powi(2));
    let p1 = [a1 * a1, 2.0 * a1, 1.0];
    let p2 = [a2 * a2, 2.0 * a2, 1.0];
    let mut c = [0.0f64; 5];
    for i in 0..3 {
        for j in 0..3 {
            c[i + j] += p1[i] * p2[j];
        }
    }
    for i in 0..3 {
        c[i] -= b1 * p2[i] + b2 * p1[i];
    }
    let roots = quartic_roots([c[0], c[1], c[2], c[3]]);

    let candidate = |lambda: f64| -> Option<Vector2<f64>> {
        let mut gp = Vector2::zeros();
        for i in 0..2 {
            let d = xi[i] + lambda;
            if d.abs() <= 1e-12 * s.max(1.0) {
                return None;
            }
            gp[i] = u[i] / d;
        }
        let g = q * gp;
        let n = g.norm();
        // Roots spoiled by a nearby pole do not land on the circle; drop them.
        (n.is_finite() && (n - 1.0).abs() <= 1e-6).then(|| g / n)
    };

    let mut best: Option<(f64, GammaSolution)> = None;
    let consider = |best: &mut Option<(f64, GammaSolution)>, g: Vector2<f64>, lambda: f64| {
        let f = reduced_objective(k, r, &g);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            *best = Some((f, GammaSolution { gamma: g, lambda }));
        }
    };
    for root in roots {
        if root.im.abs() > 1e-8 * (1.0 + root.re.abs()) {
            continue;
        }
        let lambda = root.re * s;
        if let Some(g) = candidate(lambda) {
            consider(&mut best, g, lambda);
        }
    }

    if best.is_none() {
        // Bisection on g(λ) = 1 over (−ξ_min, −ξ_min + ‖u‖], where g is decreasing.
        let (imin, ximin) = if xi[0] <= xi[1] { (0, xi[0]) } else { (1, xi[1]) };
        let mut hi = -ximin + u.norm();
        let mut lo = -ximin;
        if secular(&xi, &u, lo + 1e-12 * s.max(1.0)) > 1.0 {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if secular(&xi, &u, mid) > 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if let Some(g) = candidate(hi) {
                consider(&mut best, g, hi);
            }
        } else {
            // Hard case: u has no weight on the smallest eigenvector.
            let other = 1 - imin;
            let c_other = u[other] / (xi[other] - ximin);
            if c_other.abs() <= 1.0 {
                let c_min = (1.0 - c_other * c_other).sqrt();
                for sgn in [1.0, -1.0] {
                    let mut gp = Vector2::zeros();
                    gp[other] = c_other;
                    gp[imin] = sgn * c_min;
                    consider(&mut best, q * gp, -ximin);
                }
            }
        }
    }

    best.map(|b| b.1).ok_or_else(|| {
        Error::Internal(format!(
            "no admissible root for the γ-update (ξ = {xi:?}, u = {u:?}, roots = {roots:?})"
        ))
    })
}

/// Closed-form update when `W` is diagonal with equal weights inside each pair.
pub fn update_gamma_diagonal(
    a: &DMatrix<f64>,
    w: &DMatrix<f64>,
    z: DVectorView<'_, f64>,
) -> Result<GammaSolution> {
    let r = weighted_correlation(a, w, z);
    let n = r.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate(format!(
            "AᵀWz has norm {n:e}; the attack angle is unidentifiable"
        )));
    }
    let d = diagonal_gain(a, w);
    Ok(GammaSolution {
        gamma: r / n,
        lambda: n - d,
    })
}

/// `AᵀWz`, exploiting a diagonal `W`.
pub fn weighted_correlation(a: &DMatrix<f64>, w: &DMatrix<f64>, z: DVectorView<'_, f64>) -> Vector2<f64> {
    let mut r = Vector2::zeros();
    for i in 0..a.nrows() {
        let wz = w[(i, i)] * z[i];
        r[0] += a[(i, 0)] * wz;
        r[1] += a[(i, 1)] * wz;
    }
    r
}

/// `d = Σ_k w_k (x_k² + y_k²)` so that `AᵀWA = d·I` for paired-equal diagonal `W`.
pub fn diagonal_gain(a: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    (0..a.nrows() / 2)
        .map(|p| w[(2 * p, 2 * p)] * (a[(2 * p, 0)].powi(2) + a[(2 * p + 1, 0)].powi(2)))
        .sum()
}

/// Bus term `(z − Aγ)ᵀW(z − Aγ)`.
pub fn bus_objective(a: &DMatrix<f64>, w: &DMatrix<f64>, z: DVectorView<'_, f64>, gamma: &Vector2<f64>) -> f64 {
    let e: DVector<f64> = z - a * DVector::from_column_slice(gamma.as_slice());
    e.dot(&(w * &e))
}
