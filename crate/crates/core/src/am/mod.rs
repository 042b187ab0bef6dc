//! Joint state estimation and attack-angle reconstruction by alternating minimization.

mod gamma;
mod quartic;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

pub use gamma::{
    build_a_matrix, bus_objective, diagonal_gain, normal_terms, secular, solve_trust_circle,
    update_gamma_diagonal, update_gamma_general, weighted_correlation, GammaSolution,
};
pub use quartic::quartic_roots;

use crate::error::{Error, Result};
use crate::estimation::GainMatrix;
use crate::pmu::{apply_gamma, MeasurementSet, PmuModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    /// Diagonal shortcut when every Σ_n is paired-equal diagonal, otherwise general.
    Auto,
    Diagonal,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmConfig {
    /// Relative objective change that ends the iteration.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub covariance_mode: CovarianceMode,
    /// Objectives at or below this value count as converged (exact-data runs).
    pub objective_floor: f64,
}

impl Default for AmConfig {
    fn default() -> Self {
        AmConfig {
            tolerance: 0.01,
            max_iterations: 200,
            covariance_mode: CovarianceMode::Auto,
            objective_floor: 1e-20,
        }
    }
}

impl AmConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        AmConfig {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmResult {
    pub v_hat: DVector<f64>,
    pub gammas: Vec<[f64; 2]>,
    /// Estimated offsets per PMU (model unit order), radians in (−π, π].
    pub delta_theta_hat: Vec<f64>,
    /// Objective after initialization and after every sweep.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Gaussian prior `(v_s, P)` added to the objective as `(v − v_s)ᵀP(v − v_s)`.
#[derive(Debug, Clone)]
pub struct Prior<'a> {
    pub v: &'a DVector<f64>,
    pub precision: &'a DMatrix<f64>,
}

fn use_diagonal(model: &PmuModel, mode: CovarianceMode) -> Result<bool> {
    match mode {
        CovarianceMode::General => Ok(false),
        CovarianceMode::Auto => Ok(model.all_paired_diagonal()),
        CovarianceMode::Diagonal => {
            if model.all_paired_diagonal() {
                Ok(true)
            } else {
                Err(Error::InvalidArgument(
                    "diagonal γ-update requested but some Σ_n is not paired-equal diagonal".into(),
                ))
            }
        }
    }
}

/// `Σ_n H_nᵀ Γ_nᵀ W_n z_n`.
fn rotated_information(model: &PmuModel, z: &MeasurementSet, gammas: &[[f64; 2]]) -> DVector<f64> {
    let mut rhs = DVector::zeros(model.n_state());
    for (i, u) in model.units.iter().enumerate() {
        let wz = &u.w * z.z(i);
        let back = apply_gamma(-gammas[i][1].atan2(gammas[i][0]), wz.as_view());
        rhs.gemv_tr(1.0, &u.h, &back, 1.0);
    }
    rhs
}

/// `G_AM = Σ_n H_nᵀ Γ_nᵀ W_n Γ_n H_n`.
fn rotated_gain(model: &PmuModel, gammas: &[[f64; 2]]) -> DMatrix<f64> {
    let n = model.n_state();
    let mut g = DMatrix::zeros(n, n);
    for (i, u) in model.units.iter().enumerate() {
        let th = gammas[i][1].atan2(gammas[i][0]);
        let mut gh = u.h.clone();
        for c in 0..gh.ncols() {
            let col = apply_gamma(th, gh.column(c));
            gh.set_column(c, &col);
        }
        let wgh = &u.w * &gh;
        g.gemm_tr(1.0, &gh, &wgh, 1.0);
    }
    g
}

/// Exact minimizer of the objective in `v` for fixed γ (with an optional prior).
pub fn update_state(
    model: &PmuModel,
    z: &MeasurementSet,
    gammas: &[[f64; 2]],
    prior: Option<&Prior<'_>>,
) -> Result<DVector<f64>> {
    z.check(model)?;
    if gammas.len() != model.units.len() {
        return Err(Error::dims("γ count", model.units.len(), gammas.len()));
    }
    let mut g = rotated_gain(model, gammas);
    let mut rhs = rotated_information(model, z, gammas);
    if let Some(p) = prior {
        g += p.precision;
        rhs += p.precision * p.v;
    }
    Ok(GainMatrix::from_matrix(g, "rotated gain matrix")?.solve(&rhs))
}

/// `Σ_n (z_n − Γ_n H_n v)ᵀ W_n (z_n − Γ_n H_n v)` plus the prior term.
pub fn am_objective(
    model: &PmuModel,
    z: &MeasurementSet,
    v: &DVector<f64>,
    gammas: &[[f64; 2]],
    prior: Option<&Prior<'_>>,
) -> f64 {
    let mut f = 0.0;
    for (i, u) in model.units.iter().enumerate() {
        let hv = &u.h * v;
        let a = build_a_matrix(hv.as_view());
        f += bus_objective(&a, &u.w, z.z(i), &Vector2::new(gammas[i][0], gammas[i][1]));
    }
    if let Some(p) = prior {
        let d = v - p.v;
        f += d.dot(&(p.precision * &d));
    }
    f
}

/// Alternating minimization from `γ_n = [1, 0]`.
pub fn run_am(model: &PmuModel, z: &MeasurementSet, cfg: &AmConfig) -> Result<AmResult> {
    run(model, z, None, None, cfg)
}

/// As [`run_am`] but reuses a prepared factorization of `G`.
pub fn run_am_with_gain(
    model: &PmuModel,
    gain: &GainMatrix,
    z: &MeasurementSet,
    cfg: &AmConfig,
) -> Result<AmResult> {
    run(model, z, None, Some(gain), cfg)
}

/// Alternating minimization with a Gaussian prior on the (reduced) state.
pub fn run_am_hybrid(
    model: &PmuModel,
    z: &MeasurementSet,
    prior_v: &DVector<f64>,
    prior_precision: &DMatrix<f64>,
    cfg: &AmConfig,
) -> Result<AmResult> {
    model.check_state(prior_v)?;
    let n = model.n_state();
    if prior_precision.shape() != (n, n) {
        return Err(Error::dims("prior precision", n, prior_precision.nrows()));
    }
    let prior = Prior {
        v: prior_v,
        precision: prior_precision,
    };
    run(model, z, Some(&prior), None, cfg)
}

fn run(
    model: &PmuModel,
    z: &MeasurementSet,
    prior: Option<&Prior<'_>>,
    gain: Option<&GainMatrix>,
    cfg: &AmConfig,
) -> Result<AmResult> {
    z.check(model)?;
    if !(cfg.tolerance >= 0.0) || cfg.max_iterations == 0 {
        return Err(Error::InvalidArgument(
            "AM tolerance must be non-negative and max_iterations positive".into(),
        ));
    }
    let diagonal = use_diagonal(model, cfg.covariance_mode)?;
    let nu = model.units.len();
    let mut gammas = vec![[1.0, 0.0]; nu];

    // Under paired-diagonal Σ_n the rotations cancel in G_AM, so one factorization serves every v-update.
    let fixed_gain = if diagonal {
        match (gain, prior) {
            (Some(g), None) if g.dim() == model.n_state() => Some(g.clone()),
            _ => {
                let mut g = crate::estimation::pmu_information(model);
                if let Some(p) = prior {
                    g += p.precision;
                }
                Some(GainMatrix::from_matrix(g, "gain matrix")?)
            }
        }
    } else {
        None
    };
    let v_update = |gammas: &[[f64; 2]]| -> Result<DVector<f64>> {
        match &fixed_gain {
            Some(g) => {
                let mut rhs = rotated_information(model, z, gammas);
                if let Some(p) = prior {
                    rhs += p.precision * p.v;
                }
                Ok(g.solve(&rhs))
            }
            None => update_state(model, z, gammas, prior),
        }
    };

    let mut v = v_update(&gammas)?;
    let mut prev = am_objective(model, z, &v, &gammas, prior);
    let mut trace = vec![prev];
    let mut converged = prev <= cfg.objective_floor;
    let mut iterations = 0;
    let slack = |f: f64| 1e-10 * f.abs().max(1.0);

    while !converged && iterations < cfg.max_iterations {
        for (i, u) in model.units.iter().enumerate() {
            let hv = &u.h * &v;
            let a = build_a_matrix(hv.as_view());
            let sol = if diagonal {
                update_gamma_diagonal(&a, &u.w, z.z(i))?
            } else {
                update_gamma_general(&a, &u.w, z.z(i))?
            };
            gammas[i] = [sol.gamma[0], sol.gamma[1]];
        }
        let mid = am_objective(model, z, &v, &gammas, prior);
        if mid > prev + slack(prev) {
            return Err(Error::Internal(format!(
                "γ-sweep increased the objective from {prev:.12e} to {mid:.12e}"
            )));
        }
        v = v_update(&gammas)?;
        let curr = am_objective(model, z, &v, &gammas, prior);
        if curr > mid + slack(mid) {
            return Err(Error::Internal(format!(
                "v-update increased the objective from {mid:.12e} to {curr:.12e}"
            )));
        }
        iterations += 1;
        trace.push(curr);
        converged = curr <= cfg.objective_floor || (curr - prev).abs() <= cfg.tolerance * curr.abs();
        prev = curr;
    }

    let delta_theta_hat = gammas.iter().map(|g| g[1].atan2(g[0])).collect();
    Ok(AmResult {
        v_hat: v,
        gammas,
        delta_theta_hat,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// `‖x̂ − x‖ / ‖x‖`.
pub fn relative_error(est: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    (est - truth).norm() / truth.norm()
}

/// Relative error of estimated offsets over all PMUs, with each difference wrapped to (−π, π].
pub fn relative_angle_error(est: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = est
        .iter()
        .zip(truth)
        .map(|(a, b)| {
            let d = (a - b).sin().atan2((a - b).cos());
            d * d
        })
        .sum();
    let den: f64 = truth.iter().map(|t| t * t).sum();
    (num / den).sqrt()
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
    fn identity_gammas_give_ml() {
        let (m, v) = setup();
        let z = noiseless_measurements(&m, &v, &AttackScenario::none(2)).unwrap();
        let x = update_state(&m, &z, &[[1.0, 0.0], [1.0, 0.0]], None).unwrap();
        let g = GainMatrix::new(&m).unwrap();
        assert!((x - crate::estimation::estimate_ml(&m, &g, &z).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn true_gammas_recover_state() {
        let (m, v) = setup();
        let atk = AttackScenario::from_angles(2, &[(1, 0.4)]).unwrap();
        let z = noiseless_measurements(&m, &v, &atk).unwrap();
        let g = [[1.0, 0.0], [0.4f64.cos(), 0.4f64.sin()]];
        assert!((update_state(&m, &z, &g, None).unwrap() - &v).amax() < 1e-10);
    }

    #[test]
    fn relative_angle_error_wraps() {
        let e = relative_angle_error(&[std::f64::consts::PI - 0.01], &[-std::f64::consts::PI + 0.01]);
        assert!((e - 0.02 / (std::f64::consts::PI - 0.01)).abs() < 1e-12);
    }
}
