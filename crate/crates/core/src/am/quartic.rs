//! Roots of a monic quartic via the eigenvalues of its companion matrix.

use nalgebra::Matrix4;
use num_complex::Complex64;

/// Evaluates `x⁴ + c[3]x³ + c[2]x² + c[1]x + c[0]` and its derivative.
fn eval(c: &[f64; 4], x: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(1.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for k in (0..4).rev() {
        dp = dp * x + p;
        p = p * x + c[k];
    }
    (p, dp)
}

/// All four complex roots of the monic quartic with low-order coefficients `c`.
///
/// Each eigenvalue is refined with a few Newton steps on the polynomial itself.
pub fn quartic_roots(c: [f64; 4]) -> [Complex64; 4] {
    #[rustfmt::skip]
    let companion = Matrix4::new(
        0.0, 0.0, 0.0, -c[0],
        1.0, 0.0, 0.0, -c[1],
        0.0, 1.0, 0.0, -c[2],
        0.0, 0.0, 1.0, -c[3],
    );
    let eig = companion.complex_eigenvalues();
    let mut roots = [Complex64::new(0.0, 0.0); 4];
    for (r, e) in roots.iter_mut().zip(eig.iter()) {
        let mut x = *e;
        for _ in 0..4 {
            let (p, dp) = eval(&c, x);
            if dp.norm() == 0.0 {
                break;
            }
            let next = x - p / dp;
            if !(eval(&c, next).0.norm() < p.norm()) {
                break;
            }
            x = next;
        }
        *r = x;
    }
    roots
}
