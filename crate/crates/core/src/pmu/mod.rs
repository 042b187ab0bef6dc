//! PMU measurement systems, attack rotations, and measurement simulation.

mod attack;
mod simulate;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use attack::{apply_gamma, apply_j, gamma_matrix, AttackScenario};
pub use simulate::{
    noiseless_measurements, simulate_measurements, simulate_with_rng, MeasurementSet,
    UnitMeasurement,
};

use crate::error::{Error, Result};
use crate::netcase::{AdmittanceModel, NetworkCase};

/// Default rectangular-component noise standard deviations, p.u.
pub const SIGMA_V: f64 = 0.01;
pub const SIGMA_I: f64 = 0.02;

/// Buses carrying a PMU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmuPlacement {
    pub a: Vec<bool>,
}

impl PmuPlacement {
    pub fn from_indices(n_bus: usize, idx: &[usize]) -> Result<Self> {
        let mut a = vec![false; n_bus];
        for &k in idx {
            if k >= n_bus {
                return Err(Error::InvalidArgument(format!(
                    "placement index {k} out of range for {n_bus} buses"
                )));
            }
            a[k] = true;
        }
        Ok(PmuPlacement { a })
    }

    pub fn from_bus_ids(case: &NetworkCase, ids: &[u32]) -> Result<Self> {
        let idx = ids
            .iter()
            .map(|&id| case.bus_index_or_err(id))
            .collect::<Result<Vec<_>>>()?;
        Self::from_indices(case.n_bus(), &idx)
    }

    /// Parses a placement file: one bus id per line, `#` or `%` comments.
    pub fn parse(text: &str, case: &NetworkCase) -> Result<Self> {
        let mut ids = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let l = line.split(['#', '%']).next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            ids.push(l.parse::<u32>().map_err(|_| Error::Syntax {
                line: i + 1,
                message: format!("expected a bus id, found `{l}`"),
            })?);
        }
        Self::from_bus_ids(case, &ids)
    }

    pub fn all(n_bus: usize) -> Self {
        PmuPlacement {
            a: vec![true; n_bus],
        }
    }

    /// Internal indices of PMU buses, ascending.
    pub fn pmu_buses(&self) -> Vec<usize> {
        (0..self.a.len()).filter(|&k| self.a[k]).collect()
    }

    pub fn count(&self) -> usize {
        self.a.iter().filter(|&&x| x).count()
    }
}

/// Phasor measured by one (real, imag) row pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Channel {
    Voltage { bus: u32 },
    /// Current leaving `from` into branch row `branch` toward `to`.
    Current { from: u32, to: u32, branch: usize },
}

/// The measurement system of a single PMU.
#[derive(Debug, Clone)]
pub struct PmuUnit {
    pub bus: usize,
    pub bus_id: u32,
    pub h: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Σ⁻¹.
    pub w: DMatrix<f64>,
    /// Lower Cholesky factor of Σ, used to colour noise.
    pub noise_factor: DMatrix<f64>,
    pub channels: Vec<Channel>,
}

impl PmuUnit {
    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Number of incident line-current channels, L_n.
    pub fn n_lines(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn set_covariance(&mut self, sigma: DMatrix<f64>) -> Result<()> {
        let m = self.rows();
        if sigma.nrows() != m || sigma.ncols() != m {
            return Err(Error::dims(
                format!("covariance of PMU {}", self.bus_id),
                m,
                sigma.nrows(),
            ));
        }
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax() {
            return Err(Error::InvalidArgument(format!(
                "covariance of PMU {} is not symmetric",
                self.bus_id
            )));
        }
        let chol = nalgebra::Cholesky::new(sigma.clone()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "covariance of PMU {} is not positive definite",
                self.bus_id
            ))
        })?;
        self.w = chol.inverse();
        self.noise_factor = chol.l();
        self.sigma = sigma;
        Ok(())
    }

    /// True when Σ is diagonal with equal variances inside every (re, im) pair.
    pub fn has_paired_diagonal_covariance(&self) -> bool {
        let m = self.rows();
        let scale = self.sigma.amax();
        let tol = 1e-12 * scale;
        for j in 0..m {
            for i in 0..m {
                if i != j && self.sigma[(i, j)].abs() > tol {
                    return false;
                }
            }
        }
        (0..m / 2).all(|p| (self.sigma[(2 * p, 2 * p)] - self.sigma[(2 * p + 1, 2 * p + 1)]).abs() <= tol)
    }
}

/// Per-PMU linear systems for all installed PMUs, in ascending bus order.
#[derive(Debug, Clone)]
pub struct PmuModel {
    pub n_bus: usize,
    pub placement: PmuPlacement,
    pub units: Vec<PmuUnit>,
    /// State column removed by [`PmuModel::reduced`], if any.
    pub dropped_column: Option<usize>,
}

/// Expands a complex row `c` acting on V into the real pair acting on `[v_r; v_i]`.
fn push_complex_row(h: &mut DMatrix<f64>, row: usize, n_bus: usize, entries: &[(usize, Complex64)]) {
    for &(k, c) in entries {
        h[(row, k)] += c.re;
        h[(row, n_bus + k)] -= c.im;
        h[(row + 1, k)] += c.im;
        h[(row + 1, n_bus + k)] += c.re;
    }
}

/// Builds H_n and a diagonal Σ_n for every placed PMU.
pub fn build_pmu_model(
    adm: &AdmittanceModel,
    placement: &PmuPlacement,
    sigma_v: f64,
    sigma_i: f64,
) -> Result<PmuModel> {
    let nb = adm.n_bus();
    if placement.a.len() != nb {
        return Err(Error::dims("placement length", nb, placement.a.len()));
    }
    if !(sigma_v > 0.0 && sigma_i > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise standard deviations must be positive (got {sigma_v}, {sigma_i})"
        )));
    }
    let mut units = Vec::new();
    for n in placement.pmu_buses() {
        let lines = &adm.incident[n];
        let m = 2 + 2 * lines.len();
        let mut h = DMatrix::zeros(m, 2 * nb);
        let mut var = DVector::zeros(m);
        let mut channels = Vec::with_capacity(1 + lines.len());
        push_complex_row(&mut h, 0, nb, &[(n, Complex64::new(1.0, 0.0))]);
        var[0] = sigma_v * sigma_v;
        var[1] = sigma_v * sigma_v;
        channels.push(Channel::Voltage { bus: adm.bus_ids[n] });
        for (p, &l) in lines.iter().enumerate() {
            let row = 2 + 2 * p;
            push_complex_row(&mut h, row, nb, &adm.current_row(l, n));
            var[row] = sigma_i * sigma_i;
            var[row + 1] = sigma_i * sigma_i;
            let e = adm.ends[l];
            let other = if e.from == n { e.to } else { e.from };
            channels.push(Channel::Current {
                from: adm.bus_ids[n],
                to: adm.bus_ids[other],
                branch: l,
            });
        }
        let sigma = DMatrix::from_diagonal(&var);
        let w = DMatrix::from_diagonal(&var.map(|x| 1.0 / x));
        let noise_factor = DMatrix::from_diagonal(&var.map(f64::sqrt));
        units.push(PmuUnit {
            bus: n,
            bus_id: adm.bus_ids[n],
            h,
            sigma,
            w,
            noise_factor,
            channels,
        });
    }
    Ok(PmuModel {
        n_bus: nb,
        placement: placement.clone(),
        units,
        dropped_column: None,
    })
}

impl PmuModel {
    /// Length of the state vector this model acts on.
    pub fn n_state(&self) -> usize {
        2 * self.n_bus - usize::from(self.dropped_column.is_some())
    }

    pub fn total_rows(&self) -> usize {
        self.units.iter().map(PmuUnit::rows).sum()
    }

    /// Position of the PMU at internal bus `k`, if any.
    pub fn unit_at(&self, k: usize) -> Option<usize> {
        self.units.iter().position(|u| u.bus == k)
    }

    pub fn unit_by_id(&self, id: u32) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u.bus_id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("no PMU at bus {id}")))
    }

    pub fn all_paired_diagonal(&self) -> bool {
        self.units.iter().all(PmuUnit::has_paired_diagonal_covariance)
    }

    /// Copy with the imaginary-part column of bus `reference` removed from every H_n.
    pub fn reduced(&self, reference: usize) -> Result<PmuModel> {
        if self.dropped_column.is_some() {
            return Err(Error::InvalidArgument("model is already reduced".into()));
        }
        if reference >= self.n_bus {
            return Err(Error::InvalidArgument(format!(
                "reference bus index {reference} out of range"
            )));
        }
        let col = self.n_bus + reference;
        let mut out = self.clone();
        for u in &mut out.units {
            u.h = u.h.clone().remove_column(col);
        }
        out.dropped_column = Some(col);
        Ok(out)
    }

    /// Maps a full `[v_r; v_i]` vector into this model's state space.
    pub fn reduce_state(&self, v: &DVector<f64>) -> DVector<f64> {
        match self.dropped_column {
            Some(c) => v.clone().remove_row(c),
            None => v.clone(),
        }
    }

    /// Inverse of [`PmuModel::reduce_state`]; the dropped entry is set to zero.
    pub fn expand_state(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.dropped_column {
            Some(c) => x.clone().insert_row(c, 0.0),
            None => x.clone(),
        }
    }

    /// Checks that `x` has this model's state length.
    pub fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_state() {
            return Err(Error::dims("state vector", self.n_state(), x.len()));
        }
        Ok(())
    }
}
