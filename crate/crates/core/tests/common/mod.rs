#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::DVector;
use tsa_core::estimation::GainMatrix;
use tsa_core::netcase::{
    build_admittance, load_case, solve_power_flow, AdmittanceModel, NetworkCase, PowerFlowOptions,
};
use tsa_core::pmu::{build_pmu_model, PmuModel, PmuPlacement, SIGMA_I, SIGMA_V};

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// A network at one load level with its shipped PMU placement.
pub struct Fixture {
    pub case: NetworkCase,
    pub adm: AdmittanceModel,
    pub placement: PmuPlacement,
    /// Power-flow profile as solved (slack angle from the case file).
    pub v: DVector<f64>,
    /// Same profile rotated so the slack angle is zero.
    pub v0: DVector<f64>,
    pub slack: usize,
}

impl Fixture {
    pub fn load(name: &str, scale: f64) -> Self {
        let case = load_case(data(&format!("{name}.case"))).unwrap();
        let adm = build_admittance(&case).unwrap();
        let text = std::fs::read_to_string(data(&format!("{name}.pmu"))).unwrap();
        let placement = PmuPlacement::parse(&text, &case).unwrap();
        let pf = solve_power_flow(&case, scale, &PowerFlowOptions::default()).unwrap();
        let slack = case.slack_index();
        let v0 = pf.profile.rotated(-pf.profile.phasor(slack).arg()).v;
        Fixture {
            v: pf.profile.v,
            v0,
            case,
            adm,
            placement,
            slack,
        }
    }

    pub fn idx(&self, id: u32) -> usize {
        self.case.bus_index_or_err(id).unwrap()
    }

    /// Full-state model (2·N_b columns).
    pub fn model(&self) -> PmuModel {
        build_pmu_model(&self.adm, &self.placement, SIGMA_V, SIGMA_I).unwrap()
    }

    /// Model with the slack imaginary part removed, and the matching true state.
    pub fn reduced(&self) -> (PmuModel, DVector<f64>) {
        let m = self.model().reduced(self.slack).unwrap();
        let x = m.reduce_state(&self.v0);
        (m, x)
    }

    pub fn with_placement(&self, ids: &[u32]) -> PmuModel {
        let p = PmuPlacement::from_bus_ids(&self.case, ids).unwrap();
        build_pmu_model(&self.adm, &p, SIGMA_V, SIGMA_I).unwrap()
    }

    pub fn gain(&self, m: &PmuModel) -> GainMatrix {
        GainMatrix::new(m).unwrap()
    }

    /// (internal index, radians) list from (bus id, degrees) pairs.
    pub fn attack(&self, pairs: &[(u32, f64)]) -> tsa_core::pmu::AttackScenario {
        let list: Vec<(usize, f64)> = pairs.iter().map(|&(b, d)| (self.idx(b), d.to_radians())).collect();
        tsa_core::pmu::AttackScenario::from_angles(self.case.n_bus(), &list).unwrap()
    }
}

pub fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Exact MSE of the attacked ML estimate built from dense stacked matrices:
/// `v̂ = L Γ (H v + w)` with `L = (HᵀWH)⁻¹ HᵀW`, so the MSE is
/// `‖LΓHv − v‖² + tr(LΓΣΓᵀLᵀ)`.
pub fn dense_attacked_mse(m: &PmuModel, attack: &tsa_core::pmu::AttackScenario, v: &DVector<f64>) -> f64 {
    use nalgebra::DMatrix;
    let rows = m.total_rows();
    let n = m.n_state();
    let mut h = DMatrix::zeros(rows, n);
    let mut sigma = DMatrix::zeros(rows, rows);
    let mut gamma = DMatrix::zeros(rows, rows);
    let mut at = 0;
    for u in &m.units {
        let r = u.rows();
        h.view_mut((at, 0), (r, n)).copy_from(&u.h);
        sigma.view_mut((at, at), (r, r)).copy_from(&u.sigma);
        let g = tsa_core::pmu::gamma_matrix(attack.angle(u.bus), r / 2 - 1);
        gamma.view_mut((at, at), (r, r)).copy_from(&g);
        at += r;
    }
    let w = sigma.clone().try_inverse().unwrap();
    let l = (h.transpose() * &w * &h).try_inverse().unwrap() * h.transpose() * &w;
    let lg = &l * &gamma;
    let bias = &lg * &h * v - v;
    (&lg * &sigma * lg.transpose()).trace() + bias.norm_squared()
}
