//! Search for the attack angles and PMU sets that maximize the ML estimator bias.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::GainMatrix;
use crate::pmu::{apply_j, AttackScenario, PmuModel};

pub const DEFAULT_BOUND_DEG: f64 = 70.0;
pub const DEFAULT_SUBSET_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentOptions {
    pub armijo: f64,
    pub shrink: f64,
    pub initial_step: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            armijo: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
            tolerance: 1e-7,
            max_iterations: 500,
        }
    }
}

/// Which starting point produced a candidate's best objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Zero,
    Lower,
    Upper,
    Grid,
}

/// Bias as a function of the per-PMU offsets for a fixed model and state.
///
/// With `p_n = G⁻¹H_nᵀW_n H_n v` and `q_n = G⁻¹H_nᵀW_n J H_n v`, the bias is
/// `Σ_n (cos θ_n − 1) p_n + sin θ_n q_n`, so `‖bias‖²` only needs the Gram
/// matrix of the `p`, `q` vectors.
#[derive(Debug, Clone)]
pub struct BiasLandscape {
    pub p: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    /// Gram matrix of `[p_0, q_0, p_1, q_1, …]`.
    gram: DMatrix<f64>,
    pub bus_ids: Vec<u32>,
    pub bus_index: Vec<usize>,
}

impl BiasLandscape {
    pub fn new(model: &PmuModel, gain: &GainMatrix, v: &DVector<f64>) -> Result<Self> {
        model.check_state(v)?;
        if gain.dim() != model.n_state() {
            return Err(Error::dims("gain matrix", model.n_state(), gain.dim()));
        }
        let nu = model.units.len();
        let mut basis = DMatrix::zeros(model.n_state(), 2 * nu);
        for (i, u) in model.units.iter().enumerate() {
            let z = &u.h * v;
            let jz = apply_j(z.as_view());
            basis.column_mut(2 * i).gemv_tr(1.0, &u.h, &(&u.w * z), 0.0);
            basis.column_mut(2 * i + 1).gemv_tr(1.0, &u.h, &(&u.w * jz), 0.0);
        }
        let mut p = Vec::with_capacity(nu);
        let mut q = Vec::with_capacity(nu);
        for i in 0..nu {
            p.push(gain.solve(&basis.column(2 * i).into_owned()));
            q.push(gain.solve(&basis.column(2 * i + 1).into_owned()));
        }
        let mut cols = DMatrix::zeros(model.n_state(), 2 * nu);
        for i in 0..nu {
            cols.set_column(2 * i, &p[i]);
            cols.set_column(2 * i + 1, &q[i]);
        }
        let gram = cols.tr_mul(&cols);
        Ok(BiasLandscape {
            p,
            q,
            gram,
            bus_ids: model.units.iter().map(|u| u.bus_id).collect(),
            bus_index: model.units.iter().map(|u| u.bus).collect(),
        })
    }

    pub fn n_units(&self) -> usize {
        self.p.len()
    }

    /// Bias vector for offsets `theta` on units `units`.
    pub fn bias(&self, units: &[usize], theta: &[f64]) -> DVector<f64> {
        let mut b = DVector::zeros(self.p[0].len());
        for (&u, &t) in units.iter().zip(theta) {
            let (s, c) = t.sin_cos();
            b.axpy(c - 1.0, &self.p[u], 1.0);
            b.axpy(s, &self.q[u], 1.0);
        }
        b
    }

    fn coeffs(units: &[usize], theta: &[f64]) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(2 * units.len());
        for (&u, &t) in units.iter().zip(theta) {
            let (s, c) = t.sin_cos();
            out.push((2 * u, c - 1.0));
            out.push((2 * u + 1, s));
        }
        out
    }

    /// `‖bias‖²` via the Gram matrix.
    pub fn squared_norm(&self, units: &[usize], theta: &[f64]) -> f64 {
        let a = Self::coeffs(units, theta);
        let mut acc = 0.0;
        for &(i, x) in &a {
            for &(j, y) in &a {
                acc += x * y * self.gram[(i, j)];
            }
        }
        acc.max(0.0)
    }

    pub fn objective(&self, units: &[usize], theta: &[f64]) -> f64 {
        self.squared_norm(units, theta).sqrt()
    }

    /// Gradient of `‖bias‖²` with respect to each entry of `theta`.
    pub fn gradient(&self, units: &[usize], theta: &[f64]) -> Vec<f64> {
        let a = Self::coeffs(units, theta);
        units
            .iter()
            .zip(theta)
            .map(|(&u, &t)| {
                let (s, c) = t.sin_cos();
                // d/dθ of (c−1) p + s q is −s p + c q.
                let mut dot = 0.0;
                for &(j, y) in &a {
                    dot += y * (-s * self.gram[(2 * u, j)] + c * self.gram[(2 * u + 1, j)]);
                }
                2.0 * dot
            })
            .collect()
    }

    /// Derivative of the bias vector itself with respect to θ of unit `u`.
    pub fn bias_derivative(&self, u: usize, theta: f64) -> DVector<f64> {
        let (s, c) = theta.sin_cos();
        &self.q[u] * c - &self.p[u] * s
    }

    fn unit_of_bus(&self, k: usize) -> Option<usize> {
        self.bus_index.iter().position(|&b| b == k)
    }
}

/// Result of a bounded ascent on one PMU set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ascent {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Projected gradient ascent on `‖bias‖²` over a box, with `fixed` offsets held constant.
pub fn projected_ascent(
    land: &BiasLandscape,
    free: &[usize],
    bounds: &[f64],
    fixed: &[(usize, f64)],
    init: &[f64],
    opts: &AscentOptions,
) -> Ascent {
    let nf = free.len();
    let units: Vec<usize> = free.iter().copied().chain(fixed.iter().map(|f| f.0)).collect();
    let mut theta: Vec<f64> = init
        .iter()
        .zip(bounds)
        .map(|(&x, &m)| x.clamp(-m, m))
        .chain(fixed.iter().map(|f| f.1))
        .collect();
    let project = |x: &mut [f64]| {
        for i in 0..nf {
            x[i] = x[i].clamp(-bounds[i], bounds[i]);
        }
    };
    let mut f = land.squared_norm(&units, &theta);
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let g = land.gradient(&units, &theta);
        let mut pg = theta.clone();
        for i in 0..nf {
            pg[i] += g[i];
        }
        project(&mut pg);
        let pg_norm = (0..nf).map(|i| (pg[i] - theta[i]).powi(2)).sum::<f64>().sqrt();
        if pg_norm <= opts.tolerance {
            break;
        }
        let mut t = opts.initial_step;
        let mut accepted = false;
        let mut trial = theta.clone();
        while t > 1e-20 {
            for i in 0..nf {
                trial[i] = theta[i] + t * g[i];
            }
            project(&mut trial);
            let gain: f64 = (0..nf).map(|i| g[i] * (trial[i] - theta[i])).sum();
            let ft = land.squared_norm(&units, &trial);
            if ft >= f + opts.armijo * gain {
                accepted = true;
                break;
            }
            t *= opts.shrink;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        let moved = (0..nf).any(|i| trial[i] != theta[i]);
        theta.copy_from_slice(&trial);
        f = land.squared_norm(&units, &theta);
        if !moved {
            break;
        }
    }
    theta.truncate(nf);
    Ascent {
        theta,
        objective: f.sqrt(),
        iterations,
    }
}

/// Best of the ascents started at 0, the lower bounds, and the upper bounds.
fn best_of_inits(
    land: &BiasLandscape,
    free: &[usize],
    bounds: &[f64],
    fixed: &[(usize, f64)],
    opts: &AscentOptions,
) -> (Ascent, Init) {
    let zero = vec![0.0; free.len()];
    let lower: Vec<f64> = bounds.iter().map(|m| -m).collect();
    let mut best: Option<(Ascent, Init)> = None;
    for (init, start) in [(Init::Zero, &zero), (Init::Lower, &lower), (Init::Upper, &bounds.to_vec())] {
        let a = projected_ascent(land, free, bounds, fixed, start, opts);
        if best.as_ref().is_none_or(|(b, _)| a.objective > b.objective) {
            best = Some((a, init));
        }
    }
    best.expect("three inits")
}

/// Exhaustive 1-D scan on a uniform grid of `step` radians over `[-bound, bound]`.
fn grid_scan(land: &BiasLandscape, unit: usize, bound: f64, fixed: &[(usize, f64)], step: f64) -> Ascent {
    let units: Vec<usize> = std::iter::once(unit).chain(fixed.iter().map(|f| f.0)).collect();
    let mut theta: Vec<f64> = std::iter::once(0.0).chain(fixed.iter().map(|f| f.1)).collect();
    let n = (2.0 * bound / step).round() as i64;
    let mut best = (0.0, f64::NEG_INFINITY);
    for k in 0..=n {
        let t = (-bound + k as f64 * step).min(bound);
        theta[0] = t;
        let f = land.squared_norm(&units, &theta);
        if f > best.1 {
            best = (t, f);
        }
    }
    Ascent {
        theta: vec![best.0],
        objective: best.1.max(0.0).sqrt(),
        iterations: (n + 1) as usize,
    }
}

/// One evaluated PMU set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub buses: Vec<u32>,
    pub objective: f64,
    pub delta_theta: Vec<f64>,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityResult {
    pub attacked_buses: Vec<u32>,
    /// Offsets for `attacked_buses`, radians.
    pub delta_theta_star: Vec<f64>,
    pub objective: f64,
    pub log: Vec<CandidateLog>,
}

impl VulnerabilityResult {
    /// Candidates sorted by decreasing objective, ties by bus set.
    pub fn ranked(&self) -> Vec<&CandidateLog> {
        let mut r: Vec<&CandidateLog> = self.log.iter().collect();
        r.sort_by(|a, b| better(b, a));
        r
    }
}

/// Ordering that puts the preferred candidate last: higher objective, then lexicographically smaller set.
fn better(a: &CandidateLog, b: &CandidateLog) -> std::cmp::Ordering {
    let scale = a.objective.abs().max(b.objective.abs()).max(1e-300);
    if (a.objective - b.objective).abs() > 1e-12 * scale {
        a.objective.total_cmp(&b.objective)
    } else {
        b.buses.cmp(&a.buses)
    }
}

fn check_bounds(land: &BiasLandscape, n_bus: usize, bounds: &[f64]) -> Result<Vec<f64>> {
    if bounds.len() != n_bus {
        return Err(Error::dims("bounds", n_bus, bounds.len()));
    }
    if bounds.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
        return Err(Error::InvalidArgument("bounds must be finite and non-negative".into()));
    }
    Ok(land.bus_index.iter().map(|&k| bounds[k]).collect())
}

/// The same bound (degrees) on every bus.
pub fn uniform_bounds(n_bus: usize, deg: f64) -> Vec<f64> {
    vec![deg.to_radians(); n_bus]
}

/// Maximizes `‖bias‖` over the attack set `b` (per-bus flags), starting from `init` (per-bus angles).
pub fn maximize_bias_fixed_set(
    land: &BiasLandscape,
    b: &[bool],
    bounds: &[f64],
    init: &[f64],
    opts: &AscentOptions,
) -> Result<(AttackScenario, f64)> {
    let n_bus = b.len();
    let unit_bounds = check_bounds(land, n_bus, bounds)?;
    if init.len() != n_bus {
        return Err(Error::dims("initial angles", n_bus, init.len()));
    }
    let mut free = Vec::new();
    for k in 0..n_bus {
        if b[k] {
            free.push(land.unit_of_bus(k).ok_or_else(|| {
                Error::InvalidArgument(format!("bus index {k} is attacked but has no PMU"))
            })?);
        }
    }
    let fb: Vec<f64> = free.iter().map(|&u| unit_bounds[u]).collect();
    let start: Vec<f64> = free.iter().map(|&u| init[land.bus_index[u]]).collect();
    let a = if free.is_empty() {
        Ascent {
            theta: vec![],
            objective: 0.0,
            iterations: 0,
        }
    } else {
        projected_ascent(land, &free, &fb, &[], &start, opts)
    };
    let mut s = AttackScenario::none(n_bus);
    for (&u, &t) in free.iter().zip(&a.theta) {
        let k = land.bus_index[u];
        s.b[k] = true;
        s.delta_theta[k] = t;
        s.delta_theta_max[k] = bounds[k];
    }
    Ok((s, a.objective))
}

fn n_choose_k(n: usize, k: usize) -> u64 {
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
        if r > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    r as u64
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let mut i = k;
        while i > 0 && c[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        c[i - 1] += 1;
        for j in i..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

fn finish(log: Vec<CandidateLog>) -> VulnerabilityResult {
    let best = log
        .iter()
        .max_by(|a, b| better(a, b))
        .cloned()
        .expect("non-empty log");
    VulnerabilityResult {
        attacked_buses: best.buses,
        delta_theta_star: best.delta_theta,
        objective: best.objective,
        log,
    }
}

/// Exhaustive search over all `n_p`-subsets of PMU buses.
pub fn find_vulnerable_optimal(
    land: &BiasLandscape,
    n_bus: usize,
    n_p: usize,
    bounds: &[f64],
    cap: u64,
    opts: &AscentOptions,
) -> Result<VulnerabilityResult> {
    let nu = land.n_units();
    if n_p == 0 || n_p > nu {
        return Err(Error::InvalidArgument(format!(
            "number of attacked PMUs must be in 1..={nu}, got {n_p}"
        )));
    }
    let count = n_choose_k(nu, n_p);
    if count > cap {
        return Err(Error::InvalidArgument(format!(
            "{count} candidate sets exceed the cap of {cap}"
        )));
    }
    let ub = check_bounds(land, n_bus, bounds)?;
    let log: Vec<CandidateLog> = combinations(nu, n_p)
        .into_par_iter()
        .map(|set| {
            let fb: Vec<f64> = set.iter().map(|&u| ub[u]).collect();
            let (a, init) = best_of_inits(land, &set, &fb, &[], opts);
            CandidateLog {
                buses: set.iter().map(|&u| land.bus_ids[u]).collect(),
                objective: a.objective,
                delta_theta: a.theta,
                init,
            }
        })
        .collect();
    Ok(finish(log))
}

/// Greedy search: each stage fixes earlier choices and adds the best single PMU.
///
/// With `grid_step` set, each 1-D subproblem is solved by an exhaustive scan with that
/// spacing (radians) instead of gradient ascent.
pub fn find_vulnerable_greedy(
    land: &BiasLandscape,
    n_bus: usize,
    n_p: usize,
    bounds: &[f64],
    grid_step: Option<f64>,
    opts: &AscentOptions,
) -> Result<VulnerabilityResult> {
    let nu = land.n_units();
    if n_p == 0 || n_p > nu {
        return Err(Error::InvalidArgument(format!(
            "number of attacked PMUs must be in 1..={nu}, got {n_p}"
        )));
    }
    let ub = check_bounds(land, n_bus, bounds)?;
    let mut fixed: Vec<(usize, f64)> = Vec::new();
    let mut log = Vec::new();
    for _ in 0..n_p {
        let candidates: Vec<usize> = (0..nu).filter(|u| fixed.iter().all(|f| f.0 != *u)).collect();
        let stage: Vec<(usize, CandidateLog)> = candidates
            .into_par_iter()
            .map(|u| {
                let (a, init) = match grid_step {
                    Some(step) if !fixed.is_empty() => (grid_scan(land, u, ub[u], &fixed, step), Init::Grid),
                    _ => best_of_inits(land, &[u], &[ub[u]], &fixed, opts),
                };
                let mut buses: Vec<u32> = fixed.iter().map(|f| land.bus_ids[f.0]).collect();
                buses.push(land.bus_ids[u]);
                let mut delta_theta: Vec<f64> = fixed.iter().map(|f| f.1).collect();
                delta_theta.push(a.theta[0]);
                // Report sets in bus order with matching angles.
                let mut pairs: Vec<(u32, f64)> = buses.into_iter().zip(delta_theta).collect();
                pairs.sort_by_key(|p| p.0);
                (
                    u,
                    CandidateLog {
                        buses: pairs.iter().map(|p| p.0).collect(),
                        delta_theta: pairs.iter().map(|p| p.1).collect(),
                        objective: a.objective,
                        init,
                    },
                )
            })
            .collect();
        let (u, best) = stage
            .iter()
            .max_by(|a, b| better(&a.1, &b.1))
            .cloned()
            .expect("at least one candidate");
        let pos = best.buses.iter().position(|&b| b == land.bus_ids[u]).unwrap();
        fixed.push((u, best.delta_theta[pos]));
        log.extend(stage.into_iter().map(|s| s.1));
    }
    let buses_theta: Vec<(u32, f64)> = {
        let mut v: Vec<(u32, f64)> = fixed.iter().map(|f| (land.bus_ids[f.0], f.1)).collect();
        v.sort_by_key(|p| p.0);
        v
    };
    let units: Vec<usize> = fixed.iter().map(|f| f.0).collect();
    let theta: Vec<f64> = fixed.iter().map(|f| f.1).collect();
    Ok(VulnerabilityResult {
        attacked_buses: buses_theta.iter().map(|p| p.0).collect(),
        delta_theta_star: buses_theta.iter().map(|p| p.1).collect(),
        objective: land.objective(&units, &theta),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_enumerate_lexicographically() {
        assert_eq!(
            combinations(4, 2),
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(combinations(3, 1).len(), 3);
        assert_eq!(n_choose_k(94, 2), 4371);
        assert_eq!(n_choose_k(94, 3), 134_044);
    }

    #[test]
    fn tie_break_prefers_smaller_set() {
        let a = CandidateLog {
            buses: vec![2, 5],
            objective: 1.0,
            delta_theta: vec![0.0, 0.0],
            init: Init::Zero,
        };
        let mut b = a.clone();
        b.buses = vec![1, 9];
        let log = vec![a, b];
        let best = log.iter().max_by(|x, y| better(x, y)).unwrap();
        assert_eq!(best.buses, vec![1, 9]);
    }
}
