//! Closed-form ML and MAP estimators and the statistics of the attacked ML estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::pmu::{apply_gamma, AttackScenario, MeasurementSet, PmuModel};

/// `G = Σ_n H_nᵀ Σ_n⁻¹ H_n` (plus an optional prior precision) with its factorization.
#[derive(Debug, Clone)]
pub struct GainMatrix {
    pub g: DMatrix<f64>,
    factor: SpdFactor,
}

impl GainMatrix {
    pub fn new(model: &PmuModel) -> Result<Self> {
        Self::from_matrix(pmu_information(model), "gain matrix")
    }

    /// `G + P` for a prior precision `P`.
    pub fn with_prior(model: &PmuModel, prior_precision: &DMatrix<f64>) -> Result<Self> {
        let n = model.n_state();
        if prior_precision.shape() != (n, n) {
            return Err(Error::dims("prior precision", n, prior_precision.nrows()));
        }
        Self::from_matrix(pmu_information(model) + prior_precision, "posterior gain matrix")
    }

    pub fn from_matrix(mut g: DMatrix<f64>, what: &str) -> Result<Self> {
        crate::linalg::symmetrize(&mut g);
        let factor = SpdFactor::new(&g, what)?;
        Ok(GainMatrix { g, factor })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    pub fn trace_inverse(&self) -> f64 {
        self.inverse().trace()
    }

    pub fn condition_estimate(&self) -> f64 {
        self.factor.condition_estimate()
    }
}

/// `Σ_n H_nᵀ Σ_n⁻¹ H_n`.
pub fn pmu_information(model: &PmuModel) -> DMatrix<f64> {
    let n = model.n_state();
    let mut g = DMatrix::zeros(n, n);
    for u in &model.units {
        let wh = &u.w * &u.h;
        g.gemm_tr(1.0, &u.h, &wh, 1.0);
    }
    g
}

/// `Σ_n H_nᵀ Σ_n⁻¹ z_n`.
pub fn information_vector(model: &PmuModel, z: &MeasurementSet) -> Result<DVector<f64>> {
    z.check(model)?;
    let mut rhs = DVector::zeros(model.n_state());
    for (i, u) in model.units.iter().enumerate() {
        let wz = &u.w * z.z(i);
        rhs.gemv_tr(1.0, &u.h, &wz, 1.0);
    }
    Ok(rhs)
}

/// ML estimate `G⁻¹ Σ H_nᵀ Σ_n⁻¹ z_n`.
pub fn estimate_ml(model: &PmuModel, gain: &GainMatrix, z: &MeasurementSet) -> Result<DVector<f64>> {
    check_gain(model, gain)?;
    Ok(gain.solve(&information_vector(model, z)?))
}

/// MAP estimate `(G + P)⁻¹ (Σ H_nᵀ Σ_n⁻¹ z_n + P v_prior)`.
pub fn estimate_map(
    model: &PmuModel,
    z: &MeasurementSet,
    prior_v: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    model.check_state(prior_v)?;
    let gp = GainMatrix::with_prior(model, prior_precision)?;
    let rhs = information_vector(model, z)? + prior_precision * prior_v;
    Ok(gp.solve(&rhs))
}

fn check_gain(model: &PmuModel, gain: &GainMatrix) -> Result<()> {
    if gain.dim() != model.n_state() {
        return Err(Error::dims("gain matrix", model.n_state(), gain.dim()));
    }
    Ok(())
}

/// Mean, covariance, bias and MSE of the attacked ML estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub mse: f64,
}

/// `G⁻¹ Σ H_nᵀ Σ_n⁻¹ Γ_n H_n v`, the mean of the attacked ML estimate.
pub fn attacked_mean(
    model: &PmuModel,
    gain: &GainMatrix,
    attack: &AttackScenario,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_gain(model, gain)?;
    model.check_state(v)?;
    attack.validate(&model.placement)?;
    let mut rhs = DVector::zeros(model.n_state());
    for u in &model.units {
        let hv = &u.h * v;
        let z = apply_gamma(attack.angle(u.bus), hv.as_view());
        rhs.gemv_tr(1.0, &u.h, &(&u.w * z), 1.0);
    }
    Ok(gain.solve(&rhs))
}

/// Estimator bias `B(Δθ) v`.
pub fn bias_vector(
    model: &PmuModel,
    gain: &GainMatrix,
    attack: &AttackScenario,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(attacked_mean(model, gain, attack, v)? - v)
}

pub fn attacked_stats(
    model: &PmuModel,
    gain: &GainMatrix,
    attack: &AttackScenario,
    v: &DVector<f64>,
) -> Result<EstimatorStats> {
    let mean = attacked_mean(model, gain, attack, v)?;
    let covariance = gain.inverse();
    let bias = &mean - v;
    let mse = covariance.trace() + bias.norm_squared();
    Ok(EstimatorStats {
        mean,
        covariance,
        bias,
        mse,
    })
}
