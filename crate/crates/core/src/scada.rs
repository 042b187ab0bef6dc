//! SCADA-only Gauss-Newton state estimation in rectangular coordinates.
//!
//! The state is `[v_r; v_i]` with the reference bus imaginary part removed, so the
//! reference angle is fixed at zero.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SpdFactor};
use crate::netcase::AdmittanceModel;

pub const SIGMA_VMAG: f64 = 0.01;
pub const SIGMA_FLOW: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScadaKind {
    VMag,
    PFlowFrom,
    QFlowFrom,
    PFlowTo,
    QFlowTo,
}

impl ScadaKind {
    pub const ALL: [ScadaKind; 5] = [
        ScadaKind::VMag,
        ScadaKind::PFlowFrom,
        ScadaKind::QFlowFrom,
        ScadaKind::PFlowTo,
        ScadaKind::QFlowTo,
    ];
}

/// A measured quantity. `location` is an internal bus index for `VMag` and an
/// in-service branch row otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScadaChannel {
    pub kind: ScadaKind,
    pub location: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScadaEntry {
    pub kind: ScadaKind,
    pub location: usize,
    pub value: f64,
    pub sigma: f64,
}

impl ScadaEntry {
    pub fn channel(&self) -> ScadaChannel {
        ScadaChannel {
            kind: self.kind,
            location: self.location,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScadaMeasurementSet {
    pub entries: Vec<ScadaEntry>,
}

impl ScadaMeasurementSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("measurements serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn channels(&self) -> Vec<ScadaChannel> {
        self.entries.iter().map(ScadaEntry::channel).collect()
    }
}

/// Position of the reference imaginary part in the full `[v_r; v_i]` vector.
fn ref_col(n_bus: usize, reference: usize) -> usize {
    n_bus + reference
}

/// Inserts the fixed zero reference imaginary part.
pub fn expand_reduced(x: &DVector<f64>, n_bus: usize, reference: usize) -> DVector<f64> {
    x.clone().insert_row(ref_col(n_bus, reference), 0.0)
}

pub fn reduce_full(v: &DVector<f64>, n_bus: usize, reference: usize) -> DVector<f64> {
    v.clone().remove_row(ref_col(n_bus, reference))
}

fn check_channel(adm: &AdmittanceModel, c: &ScadaChannel) -> Result<()> {
    let limit = match c.kind {
        ScadaKind::VMag => adm.n_bus(),
        _ => adm.n_branch(),
    };
    if c.location >= limit {
        return Err(Error::InvalidArgument(format!(
            "{:?} location {} out of range ({limit})",
            c.kind, c.location
        )));
    }
    Ok(())
}

/// Measurement function and its Jacobian with respect to the reduced state.
pub fn h_and_jacobian(
    adm: &AdmittanceModel,
    reference: usize,
    channels: &[ScadaChannel],
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let nb = adm.n_bus();
    if x.len() != 2 * nb - 1 {
        return Err(Error::dims("reduced state", 2 * nb - 1, x.len()));
    }
    let v = expand_reduced(x, nb, reference);
    let volt = |k: usize| Complex64::new(v[k], v[nb + k]);
    let mut h = DVector::zeros(channels.len());
    let mut jac = DMatrix::zeros(channels.len(), 2 * nb);
    let j = Complex64::new(0.0, 1.0);
    for (r, c) in channels.iter().enumerate() {
        check_channel(adm, c)?;
        match c.kind {
            ScadaKind::VMag => {
                let k = c.location;
                let m = volt(k).norm();
                if !(m > 0.0) {
                    return Err(Error::Degenerate(format!(
                        "voltage magnitude at bus index {k} is zero"
                    )));
                }
                h[r] = m;
                jac[(r, k)] = v[k] / m;
                jac[(r, nb + k)] = v[nb + k] / m;
            }
            kind => {
                let e = adm.ends[c.location];
                let at_from = matches!(kind, ScadaKind::PFlowFrom | ScadaKind::QFlowFrom);
                let (k, coeffs) = if at_from {
                    (e.from, [(e.from, e.yff), (e.to, e.yft)])
                } else {
                    (e.to, [(e.from, e.ytf), (e.to, e.ytt)])
                };
                let vk = volt(k);
                let i: Complex64 = coeffs.iter().map(|&(b, y)| y * volt(b)).sum();
                let s = vk * i.conj();
                let real = matches!(kind, ScadaKind::PFlowFrom | ScadaKind::PFlowTo);
                let pick = |z: Complex64| if real { z.re } else { z.im };
                h[r] = pick(s);
                for &(b, y) in &coeffs {
                    let ds_dr = vk * y.conj();
                    let ds_di = -j * vk * y.conj();
                    jac[(r, b)] += pick(ds_dr);
                    jac[(r, nb + b)] += pick(ds_di);
                }
                jac[(r, k)] += pick(i.conj());
                jac[(r, nb + k)] += pick(j * i.conj());
            }
        }
    }
    let jac = jac.remove_column(ref_col(nb, reference));
    Ok((h, jac))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussNewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Relative cost decrease below which an accepted step ends the iteration.
    pub cost_tolerance: f64,
    /// Rejected trial steps, each with heavier damping, before an iteration is declared divergent.
    pub max_rejections: usize,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        GaussNewtonOptions {
            tolerance: 1e-8,
            max_iterations: 50,
            cost_tolerance: 1e-12,
            max_rejections: 40,
        }
    }
}

/// SCADA estimate used as a Gaussian prior on the reduced state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScadaPrior {
    pub v_s_hat: DVector<f64>,
    /// `None` when `JᵀWJ` is numerically singular at the estimate, which happens
    /// when noise pushes a weakly observed bus onto a fold of the measurement map.
    pub sigma_s: Option<DMatrix<f64>>,
    /// `JᵀWJ` at the final iterate, the inverse of `sigma_s`.
    pub precision: DMatrix<f64>,
    pub converged: bool,
    /// Largest step component at the last iteration.
    pub final_mismatch: f64,
    pub iterations: usize,
    /// Weighted squared residual at the final iterate.
    pub cost: f64,
}

/// Gauss-Newton from a flat start.
pub fn estimate_scada(
    adm: &AdmittanceModel,
    reference: usize,
    meas: &ScadaMeasurementSet,
    opts: &GaussNewtonOptions,
) -> Result<ScadaPrior> {
    let nb = adm.n_bus();
    let n = 2 * nb - 1;
    if meas.entries.len() < n {
        return Err(Error::Unobservable(format!(
            "{} SCADA measurements for {n} states",
            meas.entries.len()
        )));
    }
    let channels = meas.channels();
    let z = DVector::from_iterator(channels.len(), meas.entries.iter().map(|e| e.value));
    let mut w = DVector::zeros(channels.len());
    for (i, e) in meas.entries.iter().enumerate() {
        if !(e.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("SCADA entry {i} has sigma {}", e.sigma)));
        }
        w[i] = 1.0 / (e.sigma * e.sigma);
    }

    // Iterate on polar coordinates [θ without the reference; |V|], where angle
    // directions are straight lines and the flat start is well posed.
    let mut p = DVector::zeros(n);
    p.rows_mut(nb - 1, nb).fill(1.0);
    let eval = |p: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
        let x = polar_to_rect(p, nb, reference);
        let (h, jac) = h_and_jacobian(adm, reference, &channels, &x)?;
        Ok((h, jac, x))
    };
    let cost_at = |h: &DVector<f64>| -> f64 {
        let r = &z - h;
        r.component_mul(&r).dot(&w)
    };

    let mut iterations = 0;
    let mut step_max = f64::INFINITY;
    let mut converged = false;
    let (mut h, mut jac, mut x) = eval(&p)?;
    let mut cost = cost_at(&h);
    // Levenberg-Marquardt: pure Gauss-Newton while it makes progress, damped
    // towards gradient steps where the first-order model is poor.
    let mut mu: f64 = 0.0;
    while iterations < opts.max_iterations {
        let jp = polar_jacobian(&jac, &p, nb, reference);
        let rhs = jp.tr_mul(&(&z - &h).component_mul(&w));
        let g = weighted_gram(&jp, &w);
        let gn_step = SpdFactor::new(&g, "SCADA gain matrix").ok().map(|f| f.solve(&rhs));
        iterations += 1;
        step_max = gn_step.as_ref().map_or(f64::INFINITY, |d| d.amax());
        if step_max <= opts.tolerance {
            converged = true;
            break;
        }
        let scale = g.diagonal().max();
        let mut accepted = None;
        for _ in 0..=opts.max_rejections {
            let dp = match (&gn_step, mu > 0.0) {
                (Some(d), false) => Some(d.clone()),
                _ => {
                    let mut gd = g.clone();
                    for k in 0..gd.nrows() {
                        gd[(k, k)] += mu.max(MIN_DAMPING) * scale;
                    }
                    SpdFactor::new(&gd, "damped SCADA gain matrix").ok().map(|f| f.solve(&rhs))
                }
            };
            if let Some(dp) = dp {
                let trial = &p + &dp;
                if let Ok((ht, jt, xt)) = eval(&trial) {
                    let ct = cost_at(&ht);
                    if ct <= cost * (1.0 + 1e-12) {
                        accepted = Some((trial, ht, jt, xt, ct));
                        break;
                    }
                }
            }
            mu = (mu * 4.0).max(MIN_DAMPING);
        }
        let Some((pn, hn, jn, xn, cn)) = accepted else {
            return Err(Error::GaussNewtonDiverged {
                iterations,
                mismatch: cost,
            });
        };
        mu = if mu / 4.0 < MIN_DAMPING { 0.0 } else { mu / 4.0 };
        let stalled = cost - cn <= opts.cost_tolerance * cost;
        (p, h, jac, x, cost) = (pn, hn, jn, xn, cn);
        if stalled {
            converged = true;
            break;
        }
    }

    let precision = weighted_gram(&jac, &w);
    let sigma_s = match SpdFactor::new(&precision, "SCADA gain matrix") {
        Ok(f) => {
            let mut sg = f.inverse();
            symmetrize(&mut sg);
            Some(sg)
        }
        Err(e) => {
            log::warn!("SCADA covariance unavailable at the estimate: {e}");
            None
        }
    };
    Ok(ScadaPrior {
        v_s_hat: x,
        sigma_s,
        precision,
        converged,
        final_mismatch: step_max,
        iterations,
        cost,
    })
}

/// Rectangular reduced state from `[θ_k, k ≠ reference; |V_k|]`.
fn polar_to_rect(p: &DVector<f64>, nb: usize, reference: usize) -> DVector<f64> {
    let mut v = DVector::zeros(2 * nb);
    for k in 0..nb {
        let theta = angle_slot(k, reference).map_or(0.0, |i| p[i]);
        let m = p[nb - 1 + k];
        v[k] = m * theta.cos();
        v[nb + k] = m * theta.sin();
    }
    reduce_full(&v, nb, reference)
}

fn angle_slot(k: usize, reference: usize) -> Option<usize> {
    match k.cmp(&reference) {
        std::cmp::Ordering::Less => Some(k),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(k - 1),
    }
}

/// Chain rule from the reduced rectangular Jacobian to polar coordinates.
fn polar_jacobian(jac: &DMatrix<f64>, p: &DVector<f64>, nb: usize, reference: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(jac.nrows(), 2 * nb - 1);
    for k in 0..nb {
        let m = p[nb - 1 + k];
        let slot = angle_slot(k, reference);
        let theta = slot.map_or(0.0, |i| p[i]);
        let (s, c) = theta.sin_cos();
        let col_r = jac.column(k);
        match slot {
            Some(i) => {
                let col_i = jac.column(nb + i);
                out.set_column(i, &(col_i * (m * c) - col_r * (m * s)));
                out.set_column(nb - 1 + k, &(col_r * c + col_i * s));
            }
            None => out.set_column(nb - 1 + k, &col_r),
        }
    }
    out
}

const MIN_DAMPING: f64 = 1e-10;

fn weighted_gram(jac: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut wj = jac.clone();
    for (i, mut row) in wj.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let mut g = jac.tr_mul(&wj);
    symmetrize(&mut g);
    g
}

/// All candidate channels: every bus magnitude and both-end P/Q flows of every branch.
pub fn all_channels(adm: &AdmittanceModel) -> Vec<ScadaChannel> {
    let mut out = Vec::new();
    for kind in ScadaKind::ALL {
        let n = if kind == ScadaKind::VMag {
            adm.n_bus()
        } else {
            adm.n_branch()
        };
        out.extend((0..n).map(|location| ScadaChannel { kind, location }));
    }
    out
}

/// Seeded per-kind sample of `⌈fraction·count⌉` channels without replacement.
///
/// A draw is kept only if, at the `operating` profile, the SCADA-only standard
/// deviation of every reduced state component is at most [`MAX_SELECTION_SD`].
/// Rejected draws are replaced by further samples from the same random stream,
/// so the result depends only on `seed` and the inputs.
pub fn select_channels(
    adm: &AdmittanceModel,
    reference: usize,
    operating: &DVector<f64>,
    fraction: f64,
    sigmas: (f64, f64),
    seed: u64,
) -> Result<Vec<ScadaChannel>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "SCADA fraction must be in (0, 1], got {fraction}"
        )));
    }
    let nb = adm.n_bus();
    if operating.len() != 2 * nb {
        return Err(Error::dims("operating profile", 2 * nb, operating.len()));
    }
    let x = zero_reference(operating, nb, reference);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SELECTION_ATTEMPTS {
        let mut out = Vec::new();
        for kind in ScadaKind::ALL {
            let n = if kind == ScadaKind::VMag {
                adm.n_bus()
            } else {
                adm.n_branch()
            };
            let k = ((fraction * n as f64).ceil() as usize).min(n);
            let mut picked: Vec<usize> = sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|location| ScadaChannel { kind, location }));
        }
        if out.len() < 2 * nb - 1 {
            break;
        }
        let (_, jac) = h_and_jacobian(adm, reference, &out, &x)?;
        let w = DVector::from_iterator(out.len(), out.iter().map(|c| channel_weight(c.kind, sigmas)));
        if let Some(ch) = weighted_gram(&jac, &w).cholesky() {
            if ch.inverse().diagonal().max() <= MAX_SELECTION_SD * MAX_SELECTION_SD {
                return Ok(out);
            }
        }
    }
    Err(Error::Unobservable(format!(
        "no SCADA selection at fraction {fraction} with seed {seed} observes every state within {MAX_SELECTION_SD} p.u.; choose another seed or a larger fraction"
    )))
}

fn channel_weight(kind: ScadaKind, (sigma_vmag, sigma_flow): (f64, f64)) -> f64 {
    let s = if kind == ScadaKind::VMag { sigma_vmag } else { sigma_flow };
    1.0 / (s * s)
}

/// Largest SCADA-only state standard deviation (p.u.) accepted by [`select_channels`].
pub const MAX_SELECTION_SD: f64 = 0.1;

/// Draws tried by [`select_channels`] before giving up.
pub const SELECTION_ATTEMPTS: usize = 10_000;

/// Reduced state of `v` after rotating the reference angle to zero.
fn zero_reference(v: &DVector<f64>, nb: usize, reference: usize) -> DVector<f64> {
    let rot = Complex64::from_polar(1.0, -v[nb + reference].atan2(v[reference]));
    let mut out = v.clone();
    for k in 0..nb {
        let z = Complex64::new(v[k], v[nb + k]) * rot;
        out[k] = z.re;
        out[nb + k] = z.im;
    }
    reduce_full(&out, nb, reference)
}

/// Exact measurements of `channels` at the full profile `v`, tagged with the given standard deviations.
///
/// Flows and magnitudes do not depend on the global phase, so `v` may have any reference angle.
pub fn noiseless_scada(
    adm: &AdmittanceModel,
    reference: usize,
    channels: &[ScadaChannel],
    v: &DVector<f64>,
    sigmas: (f64, f64),
) -> Result<ScadaMeasurementSet> {
    let nb = adm.n_bus();
    if v.len() != 2 * nb {
        return Err(Error::dims("profile", 2 * nb, v.len()));
    }
    if !(sigmas.0 > 0.0 && sigmas.1 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "SCADA standard deviations must be positive, got {sigmas:?}"
        )));
    }
    let (h, _) = h_and_jacobian(adm, reference, channels, &zero_reference(v, nb, reference))?;
    let entries = channels
        .iter()
        .zip(h.iter())
        .map(|(c, &value)| ScadaEntry {
            kind: c.kind,
            location: c.location,
            value,
            sigma: if c.kind == ScadaKind::VMag { sigmas.0 } else { sigmas.1 },
        })
        .collect();
    Ok(ScadaMeasurementSet { entries })
}

/// [`noiseless_scada`] plus independent Gaussian noise with each entry's standard deviation.
pub fn simulate_scada<R: Rng + ?Sized>(
    adm: &AdmittanceModel,
    reference: usize,
    channels: &[ScadaChannel],
    v: &DVector<f64>,
    sigmas: (f64, f64),
    rng: &mut R,
) -> Result<ScadaMeasurementSet> {
    let mut m = noiseless_scada(adm, reference, channels, v, sigmas)?;
    for e in &mut m.entries {
        let n: f64 = rng.sample(StandardNormal);
        e.value += e.sigma * n;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcase::fixtures::TWO_BUS;
    use crate::netcase::{build_admittance, parse_case};

    #[test]
    fn flat_no_load_two_bus() {
        let case = parse_case(TWO_BUS).unwrap();
        let adm = build_admittance(&case).unwrap();
        let ch = all_channels(&adm);
        let x = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let (h, jac) = h_and_jacobian(&adm, 0, &ch, &x).unwrap();
        assert_eq!(h.as_slice(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(jac.shape(), (6, 3));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let case = parse_case(&TWO_BUS.replace("1 2 0 0.1 0 0 0 0 0 0 1;", "1 2 0.02 0.1 0.05 0.97 3 0 0.95 2 1;"))
            .unwrap();
        let adm = build_admittance(&case).unwrap();
        let ch = all_channels(&adm);
        let x = DVector::from_vec(vec![1.02, 0.93, -0.07]);
        let (_, jac) = h_and_jacobian(&adm, 0, &ch, &x).unwrap();
        let step = 1e-6;
        for c in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += step;
            xm[c] -= step;
            let fd = (h_and_jacobian(&adm, 0, &ch, &xp).unwrap().0 - h_and_jacobian(&adm, 0, &ch, &xm).unwrap().0)
                / (2.0 * step);
            for r in 0..ch.len() {
                assert!((fd[r] - jac[(r, c)]).abs() <= 1e-5 * jac[(r, c)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn noiseless_recovery_from_flat_start() {
        let case = parse_case(&TWO_BUS.replace("1 2 0 0.1 0 0 0 0 0 0 1;", "1 2 0.02 0.1 0.05 0 0 0 0 0 1;")).unwrap();
        let adm = build_admittance(&case).unwrap();
        let v = DVector::from_vec(vec![1.0, 0.97, 0.0, -0.08]);
        let m = noiseless_scada(&adm, 0, &all_channels(&adm), &v, (SIGMA_VMAG, SIGMA_FLOW)).unwrap();
        let p = estimate_scada(&adm, 0, &m, &GaussNewtonOptions::default()).unwrap();
        assert!(p.converged);
        assert!((expand_reduced(&p.v_s_hat, 2, 0) - v).amax() < 1e-8);
        let sigma = p.sigma_s.unwrap();
        assert!((sigma * p.precision - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn polar_jacobian_matches_finite_differences() {
        let case = parse_case(&TWO_BUS.replace("1 2 0 0.1 0 0 0 0 0 0 1;", "1 2 0.02 0.1 0.05 0 0 0 0 0 1;")).unwrap();
        let adm = build_admittance(&case).unwrap();
        let ch = all_channels(&adm);
        let p = DVector::from_vec(vec![-0.2, 1.03, 0.95]);
        let (_, jac) = h_and_jacobian(&adm, 0, &ch, &polar_to_rect(&p, 2, 0)).unwrap();
        let jp = polar_jacobian(&jac, &p, 2, 0);
        let h = |p: &DVector<f64>| h_and_jacobian(&adm, 0, &ch, &polar_to_rect(p, 2, 0)).unwrap().0;
        for c in 0..3 {
            let mut e = DVector::zeros(3);
            e[c] = 1e-6;
            let fd = (h(&(&p + &e)) - h(&(&p - &e))) / 2e-6;
            assert!((fd - jp.column(c)).amax() < 1e-6);
        }
    }

    #[test]
    fn zero_voltage_is_degenerate() {
        let case = parse_case(TWO_BUS).unwrap();
        let adm = build_admittance(&case).unwrap();
        let ch = [ScadaChannel {
            kind: ScadaKind::VMag,
            location: 1,
        }];
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert!(matches!(h_and_jacobian(&adm, 0, &ch, &x), Err(Error::Degenerate(_))));
    }
}
