use nalgebra::DMatrix;
use nalgebra::{DVector, DVectorView};
use serde::{Deserialize, Serialize};

use super::{PmuModel, PmuPlacement};
use crate::error::{Error, Result};

/// Block-diagonal Γ(Δθ) of `1 + l_n` identical 2×2 rotations.
pub fn gamma_matrix(delta_theta: f64, l_n: usize) -> DMatrix<f64> {
    let m = 2 + 2 * l_n;
    let (s, c) = delta_theta.sin_cos();
    let mut g = DMatrix::zeros(m, m);
    for p in 0..m / 2 {
        let i = 2 * p;
        g[(i, i)] = c;
        g[(i, i + 1)] = -s;
        g[(i + 1, i)] = s;
        g[(i + 1, i + 1)] = c;
    }
    g
}

/// Γ(θ)·z without forming Γ.
pub fn apply_gamma(theta: f64, z: DVectorView<'_, f64>) -> DVector<f64> {
    let (s, c) = theta.sin_cos();
    let mut out = DVector::zeros(z.len());
    for p in 0..z.len() / 2 {
        let (x, y) = (z[2 * p], z[2 * p + 1]);
        out[2 * p] = c * x - s * y;
        out[2 * p + 1] = s * x + c * y;
    }
    out
}

/// Quarter-turn of every pair, J·z with J = Γ(π/2).
pub fn apply_j(z: DVectorView<'_, f64>) -> DVector<f64> {
    let mut out = DVector::zeros(z.len());
    for p in 0..z.len() / 2 {
        out[2 * p] = -z[2 * p + 1];
        out[2 * p + 1] = z[2 * p];
    }
    out
}

/// Attacked buses, their phase offsets (radians) and per-bus bounds, indexed by bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub b: Vec<bool>,
    pub delta_theta: Vec<f64>,
    pub delta_theta_max: Vec<f64>,
}

impl AttackScenario {
    /// No buses attacked; bounds set to zero.
    pub fn none(n_bus: usize) -> Self {
        AttackScenario {
            b: vec![false; n_bus],
            delta_theta: vec![0.0; n_bus],
            delta_theta_max: vec![0.0; n_bus],
        }
    }

    /// Attacks bus indices with the given offsets; each bound equals |offset|.
    pub fn from_angles(n_bus: usize, attacks: &[(usize, f64)]) -> Result<Self> {
        let mut s = Self::none(n_bus);
        for &(k, th) in attacks {
            if k >= n_bus {
                return Err(Error::InvalidArgument(format!(
                    "attacked bus index {k} out of range"
                )));
            }
            s.b[k] = true;
            s.delta_theta[k] = th;
            s.delta_theta_max[k] = th.abs();
        }
        Ok(s)
    }

    pub fn n_bus(&self) -> usize {
        self.b.len()
    }

    pub fn attacked(&self) -> Vec<usize> {
        (0..self.b.len()).filter(|&k| self.b[k]).collect()
    }

    /// Offset applied at bus `k` (zero when not attacked).
    pub fn angle(&self, k: usize) -> f64 {
        if self.b[k] {
            self.delta_theta[k]
        } else {
            0.0
        }
    }

    /// Checks the scenario invariants against a placement.
    pub fn validate(&self, placement: &PmuPlacement) -> Result<()> {
        let n = placement.a.len();
        if self.b.len() != n || self.delta_theta.len() != n || self.delta_theta_max.len() != n {
            return Err(Error::dims("attack scenario length", n, self.b.len()));
        }
        for k in 0..n {
            if self.b[k] && !placement.a[k] {
                return Err(Error::InvalidArgument(format!(
                    "attacked bus index {k} has no PMU"
                )));
            }
            let th = self.delta_theta[k];
            let max = self.delta_theta_max[k];
            if !th.is_finite() || !(max >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "invalid attack angle or bound at bus index {k}"
                )));
            }
            if !self.b[k] && th != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "bus index {k} is not attacked but has a nonzero offset"
                )));
            }
            if th.abs() > max * (1.0 + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "offset at bus index {k} exceeds its bound"
                )));
            }
        }
        Ok(())
    }

    /// Offsets ordered like `model.units`.
    pub fn per_unit(&self, model: &PmuModel) -> Vec<f64> {
        model.units.iter().map(|u| self.angle(u.bus)).collect()
    }
}
