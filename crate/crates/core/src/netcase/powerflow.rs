use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{build_admittance, AdmittanceModel, BusKind, NetworkCase, VoltageProfile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance: 1e-8,
            max_iterations: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub profile: VoltageProfile,
    pub iterations: usize,
    /// Largest |ΔP| or |ΔQ| over the solved equations, p.u.
    pub max_mismatch: f64,
    /// Complex power injected at every bus, p.u.
    pub injections: Vec<Complex64>,
    pub slack_p: f64,
}

/// Complex bus injections `S = V ⊙ conj(Y_bus V)`.
pub fn bus_injections(adm: &AdmittanceModel, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let mut cur = Complex64::new(0.0, 0.0);
            for j in 0..n {
                cur += adm.y_bus[(i, j)] * v[j];
            }
            v[i] * cur.conj()
        })
        .collect()
}

/// Polar Newton-Raphson power flow with loads scaled by `load_scale`.
///
/// Generator active outputs stay at their case values, so the slack bus picks up
/// the change in demand. Reactive limits are not enforced.
pub fn solve_power_flow(
    case: &NetworkCase,
    load_scale: f64,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    if !(load_scale > 0.0) || !load_scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "load_scale must be positive, got {load_scale}"
        )));
    }
    let adm = build_admittance(case)?;
    let nb = case.n_bus();
    let slack = case.slack_index();

    let mut p_spec = vec![0.0; nb];
    let mut q_spec = vec![0.0; nb];
    let mut vm = vec![1.0; nb];
    let mut has_gen = vec![false; nb];
    for g in case.active_gens() {
        let k = case.bus_index(g.bus).expect("validated generator bus");
        p_spec[k] += g.p_output / case.base_mva;
        if !has_gen[k] {
            vm[k] = g.v_setpoint;
            has_gen[k] = true;
        }
    }
    for k in 0..nb {
        p_spec[k] -= load_scale * case.p_demand_pu(k);
        q_spec[k] -= load_scale * case.q_demand_pu(k);
    }

    let mut pv = Vec::new();
    let mut pq = Vec::new();
    for (k, b) in case.buses.iter().enumerate() {
        match b.kind {
            BusKind::Slack => {}
            BusKind::Pv if has_gen[k] => pv.push(k),
            _ => {
                vm[k] = 1.0;
                pq.push(k)
            }
        }
    }
    if !has_gen[slack] {
        vm[slack] = case.buses[slack].v_mag_setpoint;
    }
    let pvpq: Vec<usize> = pv.iter().chain(pq.iter()).copied().collect();
    let (npvpq, npq) = (pvpq.len(), pq.len());

    // Flat start relative to the slack angle.
    let mut va = vec![case.buses[slack].v_angle_deg.to_radians(); nb];

    let mut iterations = 0;
    loop {
        let v: Vec<Complex64> = (0..nb).map(|k| Complex64::from_polar(vm[k], va[k])).collect();
        let s = bus_injections(&adm, &v);
        let mut f = DVector::zeros(npvpq + npq);
        for (r, &k) in pvpq.iter().enumerate() {
            f[r] = s[k].re - p_spec[k];
        }
        for (r, &k) in pq.iter().enumerate() {
            f[npvpq + r] = s[k].im - q_spec[k];
        }
        let mismatch = f.amax();
        if mismatch <= opts.tolerance {
            let slack_p = s[slack].re;
            return Ok(PowerFlowSolution {
                profile: VoltageProfile::from_complex(&v),
                iterations,
                max_mismatch: mismatch,
                injections: s,
                slack_p,
            });
        }
        if iterations >= opts.max_iterations || !mismatch.is_finite() {
            return Err(Error::PowerFlowDiverged {
                iterations,
                mismatch,
            });
        }

        let jac = jacobian(&adm, &v, &pvpq, &pq);
        let dx = jac
            .lu()
            .solve(&(-f))
            .ok_or_else(|| Error::Internal("singular power-flow Jacobian".into()))?;
        for (r, &k) in pvpq.iter().enumerate() {
            va[k] += dx[r];
        }
        for (r, &k) in pq.iter().enumerate() {
            vm[k] += dx[npvpq + r];
        }
        iterations += 1;
    }
}

/// Jacobian of `[P(pvpq); Q(pq)]` with respect to `[θ(pvpq); |V|(pq)]`.
fn jacobian(adm: &AdmittanceModel, v: &[Complex64], pvpq: &[usize], pq: &[usize]) -> DMatrix<f64> {
    let nb = v.len();
    let y = &adm.y_bus;
    let i_bus: Vec<Complex64> = (0..nb)
        .map(|i| (0..nb).map(|j| y[(i, j)] * v[j]).sum())
        .collect();
    let unit: Vec<Complex64> = v.iter().map(|z| z / z.norm()).collect();
    let j_im = Complex64::new(0.0, 1.0);

    // dS_i/dθ_j = j V_i conj(δ_ij I_i - Y_ij V_j)
    let ds_dva = |i: usize, j: usize| {
        let mut t = -y[(i, j)] * v[j];
        if i == j {
            t += i_bus[i];
        }
        j_im * v[i] * t.conj()
    };
    // dS_i/d|V_j| = V_i conj(Y_ij V_j/|V_j|) + δ_ij conj(I_i) V_i/|V_i|
    let ds_dvm = |i: usize, j: usize| {
        let mut t = v[i] * (y[(i, j)] * unit[j]).conj();
        if i == j {
            t += i_bus[i].conj() * unit[i];
        }
        t
    };

    let (n1, n2) = (pvpq.len(), pq.len());
    let mut jac = DMatrix::zeros(n1 + n2, n1 + n2);
    for (r, &i) in pvpq.iter().enumerate() {
        for (c, &j) in pvpq.iter().enumerate() {
            jac[(r, c)] = ds_dva(i, j).re;
        }
        for (c, &j) in pq.iter().enumerate() {
            jac[(r, n1 + c)] = ds_dvm(i, j).re;
        }
    }
    for (r, &i) in pq.iter().enumerate() {
        for (c, &j) in pvpq.iter().enumerate() {
            jac[(n1 + r, c)] = ds_dva(i, j).im;
        }
        for (c, &j) in pq.iter().enumerate() {
            jac[(n1 + r, n1 + c)] = ds_dvm(i, j).im;
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcase::fixtures::TWO_BUS;
    use crate::netcase::parse_case;

    #[test]
    fn no_load_two_bus_is_flat() {
        let case = parse_case(TWO_BUS).unwrap();
        let sol = solve_power_flow(&case, 1.0, &PowerFlowOptions::default()).unwrap();
        let v = &sol.profile.v;
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12 && v[3].abs() < 1e-12);
    }

    #[test]
    fn loaded_two_bus_matches_closed_form() {
        // Lossless line, P load only: sin(δ) = P x / V1 V2 with V2 from the Q balance.
        let text = TWO_BUS.replace("2 1 0 0 0 0 1 1 0;", "2 1 50 0 0 0 1 1 0;");
        let case = parse_case(&text).unwrap();
        let sol = solve_power_flow(&case, 1.0, &PowerFlowOptions::default()).unwrap();
        let v2 = sol.profile.phasor(1);
        let (m, d) = (v2.norm(), v2.arg());
        // P2 = -0.5 = 10 m sin(d), Q2 = 0 = 10 m cos(d) - 10 m^2
        assert!((10.0 * m * d.sin() + 0.5).abs() < 1e-9);
        assert!((10.0 * m * d.cos() - 10.0 * m * m).abs() < 1e-9);
        assert!((sol.slack_p - 0.5).abs() < 1e-9);
    }

    #[test]
    fn non_positive_scale_rejected() {
        let case = parse_case(TWO_BUS).unwrap();
        assert!(solve_power_flow(&case, 0.0, &PowerFlowOptions::default()).is_err());
    }

    #[test]
    fn reports_divergence() {
        let text = TWO_BUS.replace("2 1 0 0 0 0 1 1 0;", "2 1 900 0 0 0 1 1 0;");
        let case = parse_case(&text).unwrap();
        match solve_power_flow(&case, 1.0, &PowerFlowOptions::default()) {
            Err(Error::PowerFlowDiverged { mismatch, .. }) => assert!(mismatch > 1e-8),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
