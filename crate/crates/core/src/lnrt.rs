//! Largest-normalized-residual bad-data removal on the stacked PMU system.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::pmu::{MeasurementSet, PmuModel};

pub const DEFAULT_THRESHOLD: f64 = 3.0;
/// Residual variances below this are treated as zero (critical measurement).
pub const CRITICAL_OMEGA: f64 = 1e-14;

/// A measurement row with its few nonzero state coefficients.
#[derive(Debug, Clone)]
struct SparseRow {
    unit: usize,
    row: usize,
    cols: Vec<(usize, f64)>,
}

/// Stacked rows of all PMUs with a per-row active mask.
struct Stack<'a> {
    model: &'a PmuModel,
    rows: Vec<SparseRow>,
    /// Start of each unit's rows in `rows`.
    offset: Vec<usize>,
    active: Vec<bool>,
}

impl<'a> Stack<'a> {
    fn new(model: &'a PmuModel) -> Self {
        let mut rows = Vec::with_capacity(model.total_rows());
        let mut offset = Vec::with_capacity(model.units.len());
        for (ui, u) in model.units.iter().enumerate() {
            offset.push(rows.len());
            for r in 0..u.rows() {
                let cols = u
                    .h
                    .row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(c, &x)| (c, x))
                    .collect();
                rows.push(SparseRow { unit: ui, row: r, cols });
            }
        }
        let active = vec![true; rows.len()];
        Stack {
            model,
            rows,
            offset,
            active,
        }
    }

    /// Active rows of each unit and the inverse of their covariance sub-block.
    fn unit_weights(&self) -> Result<Vec<(Vec<usize>, DMatrix<f64>)>> {
        let mut out = Vec::with_capacity(self.model.units.len());
        for (ui, u) in self.model.units.iter().enumerate() {
            let idx: Vec<usize> = (0..u.rows())
                .filter(|&r| self.active[self.offset[ui] + r])
                .collect();
            let w = if u.has_paired_diagonal_covariance() || is_diagonal(&u.sigma) {
                DMatrix::from_diagonal(&DVector::from_iterator(
                    idx.len(),
                    idx.iter().map(|&r| 1.0 / u.sigma[(r, r)]),
                ))
            } else {
                let sub = u.sigma.select_rows(&idx).select_columns(&idx);
                nalgebra::Cholesky::new(sub)
                    .ok_or_else(|| Error::Internal("covariance sub-block is not positive definite".into()))?
                    .inverse()
            };
            out.push((idx, w));
        }
        Ok(out)
    }

    fn gain(&self, weights: &[(Vec<usize>, DMatrix<f64>)]) -> DMatrix<f64> {
        let n = self.model.n_state();
        let mut g = DMatrix::zeros(n, n);
        for (ui, (idx, w)) in weights.iter().enumerate() {
            for (a, &ra) in idx.iter().enumerate() {
                for (b, &rb) in idx.iter().enumerate() {
                    let wab = w[(a, b)];
                    if wab == 0.0 {
                        continue;
                    }
                    let ha = &self.rows[self.offset[ui] + ra].cols;
                    let hb = &self.rows[self.offset[ui] + rb].cols;
                    for &(i, x) in ha {
                        for &(j, y) in hb {
                            g[(i, j)] += wab * x * y;
                        }
                    }
                }
            }
        }
        g
    }

    fn rhs(&self, weights: &[(Vec<usize>, DMatrix<f64>)], z: &MeasurementSet) -> DVector<f64> {
        let mut rhs = DVector::zeros(self.model.n_state());
        for (ui, (idx, w)) in weights.iter().enumerate() {
            let zi = z.z(ui);
            let zr = DVector::from_iterator(idx.len(), idx.iter().map(|&r| zi[r]));
            let wz = w * zr;
            for (a, &ra) in idx.iter().enumerate() {
                for &(i, x) in &self.rows[self.offset[ui] + ra].cols {
                    rhs[i] += x * wz[a];
                }
            }
        }
        rhs
    }

    fn row_dot(&self, k: usize, v: &DVector<f64>) -> f64 {
        self.rows[k].cols.iter().map(|&(i, x)| x * v[i]).sum()
    }

    fn quad(&self, k: usize, m: &DMatrix<f64>) -> f64 {
        let c = &self.rows[k].cols;
        let mut acc = 0.0;
        for &(i, x) in c {
            for &(j, y) in c {
                acc += x * y * m[(i, j)];
            }
        }
        acc
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| i == j || m[(i, j)] == 0.0))
}

/// Residual analysis of one WLS fit over the active rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedResiduals {
    pub v_hat: DVector<f64>,
    /// Stacked in model order (unit, then row); inactive rows hold 0.
    pub residuals: Vec<f64>,
    pub normalized: Vec<f64>,
    pub omega: Vec<f64>,
    pub critical: Vec<bool>,
    /// `(unit index, row)` of every stacked entry.
    pub position: Vec<(usize, usize)>,
}

fn analyze(stack: &Stack<'_>, z: &MeasurementSet) -> Result<NormalizedResiduals> {
    let weights = stack.unit_weights()?;
    let g = stack.gain(&weights);
    let factor = SpdFactor::new(&g, "LNRT gain matrix")?;
    let v_hat = factor.solve(&stack.rhs(&weights, z));
    let ginv = factor.inverse();
    let n = stack.rows.len();
    let mut residuals = vec![0.0; n];
    let mut normalized = vec![0.0; n];
    let mut omega = vec![0.0; n];
    let mut critical = vec![false; n];
    for k in 0..n {
        if !stack.active[k] {
            continue;
        }
        let SparseRow { unit, row, .. } = stack.rows[k];
        let r = z.z(unit)[row] - stack.row_dot(k, &v_hat);
        let var = stack.model.units[unit].sigma[(row, row)];
        let om = var - stack.quad(k, &ginv);
        residuals[k] = r;
        if om < CRITICAL_OMEGA {
            critical[k] = true;
            omega[k] = CRITICAL_OMEGA;
        } else {
            omega[k] = om;
        }
        normalized[k] = r / omega[k].sqrt();
        if critical[k] {
            normalized[k] = 0.0;
        }
    }
    Ok(NormalizedResiduals {
        v_hat,
        residuals,
        normalized,
        omega,
        critical,
        position: stack.rows.iter().map(|r| (r.unit, r.row)).collect(),
    })
}

/// One-shot WLS fit and normalized residuals `r_i / √Ω_ii` on all rows.
pub fn normalized_residuals(model: &PmuModel, z: &MeasurementSet) -> Result<NormalizedResiduals> {
    z.check(model)?;
    analyze(&Stack::new(model), z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedChannel {
    pub bus: u32,
    /// Row within the PMU's measurement vector.
    pub row: usize,
    pub normalized_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LnrtReport {
    pub v_hat: DVector<f64>,
    pub removed: Vec<RemovedChannel>,
    pub rounds: usize,
    pub final_max_normalized_residual: f64,
}

/// Repeatedly removes the row with the largest normalized residual above `threshold`.
///
/// A row whose removal would leave the system unobservable is kept and the next
/// largest is tried instead.
pub fn run_lnrt(model: &PmuModel, z: &MeasurementSet, threshold: f64) -> Result<LnrtReport> {
    z.check(model)?;
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "LNRT threshold must be positive, got {threshold}"
        )));
    }
    let mut stack = Stack::new(model);
    let mut protected = vec![false; stack.rows.len()];
    let mut removed = Vec::new();
    let mut rounds = 0;
    loop {
        let res = analyze(&stack, z)?;
        rounds += 1;
        let mut order: Vec<usize> = (0..stack.rows.len())
            .filter(|&k| stack.active[k] && !res.critical[k] && !protected[k])
            .filter(|&k| res.normalized[k].abs() > threshold)
            .collect();
        order.sort_by(|&a, &b| {
            res.normalized[b]
                .abs()
                .total_cmp(&res.normalized[a].abs())
                .then(a.cmp(&b))
        });
        let max_now = (0..stack.rows.len())
            .filter(|&k| stack.active[k])
            .map(|k| res.normalized[k].abs())
            .fold(0.0, f64::max);
        let mut done = true;
        for k in order {
            stack.active[k] = false;
            let weights = stack.unit_weights()?;
            if SpdFactor::new(&stack.gain(&weights), "probe").is_ok() {
                let SparseRow { unit, row, .. } = stack.rows[k];
                removed.push(RemovedChannel {
                    bus: model.units[unit].bus_id,
                    row,
                    normalized_residual: res.normalized[k],
                });
                done = false;
                break;
            }
            stack.active[k] = true;
            protected[k] = true;
        }
        if done {
            return Ok(LnrtReport {
                v_hat: res.v_hat,
                removed,
                rounds,
                final_max_normalized_residual: max_now,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcase::fixtures::TWO_BUS;
    use crate::netcase::{build_admittance, parse_case};
    use crate::pmu::{build_pmu_model, noiseless_measurements, AttackScenario, PmuPlacement, SIGMA_I, SIGMA_V};

    fn setup() -> (PmuModel, DVector<f64>) {
        let case = parse_case(TWO_BUS).unwrap();
        let adm = build_admittance(&case).unwrap();
        let m = build_pmu_model(&adm, &PmuPlacement::all(2), SIGMA_V, SIGMA_I).unwrap();
        (m, DVector::from_vec(vec![1.0, 0.97, 0.0, -0.08]))
    }

    #[test]
    fn clean_data_removes_nothing() {
        let (m, v) = setup();
        let z = noiseless_measurements(&m, &v, &AttackScenario::none(2)).unwrap();
        let rep = run_lnrt(&m, &z, 3.0).unwrap();
        assert!(rep.removed.is_empty());
        assert!((rep.v_hat - v).amax() < 1e-10);
    }

    #[test]
    fn single_gross_error_removed() {
        let (m, v) = setup();
        let mut z = noiseless_measurements(&m, &v, &AttackScenario::none(2)).unwrap();
        z.units[1].z[2] += 20.0 * SIGMA_I;
        let rep = run_lnrt(&m, &z, 3.0).unwrap();
        assert_eq!(rep.removed.len(), 1);
        assert_eq!((rep.removed[0].bus, rep.removed[0].row), (2, 2));
        assert!((rep.v_hat - v).amax() < 1e-10);
    }
}
