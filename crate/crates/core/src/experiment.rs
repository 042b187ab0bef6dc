//! Seeded Monte-Carlo experiments over the estimators and the vulnerability search.
//!
//! Realization `i` draws its attack (when random) and its PMU noise from a ChaCha8
//! stream seeded with `seed + i`; SCADA noise uses stream 1 of the same seed, so
//! methods run on the same configuration see the same PMU noise.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::am::{relative_angle_error, relative_error, run_am_hybrid, run_am_with_gain, AmConfig, CovarianceMode};
use crate::error::{Error, Result};
use crate::estimation::{estimate_ml, GainMatrix};
use crate::lnrt::run_lnrt;
use crate::netcase::{build_admittance, load_case, solve_power_flow, AdmittanceModel, NetworkCase, PowerFlowOptions};
use crate::pmu::{build_pmu_model, simulate_with_rng, AttackScenario, PmuModel, PmuPlacement};
use crate::scada::{estimate_scada, select_channels, simulate_scada, GaussNewtonOptions, ScadaChannel};
use crate::vulnerability::{
    find_vulnerable_greedy, find_vulnerable_optimal, uniform_bounds, AscentOptions, BiasLandscape,
    VulnerabilityResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    Am,
    AmHybrid,
    Lnrt,
    VulnOptimal,
    VulnGreedy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ml => "ml",
            Method::Am => "am",
            Method::AmHybrid => "am_hybrid",
            Method::Lnrt => "lnrt",
            Method::VulnOptimal => "vuln_optimal",
            Method::VulnGreedy => "vuln_greedy",
        }
    }

    fn is_vulnerability(self) -> bool {
        matches!(self, Method::VulnOptimal | Method::VulnGreedy)
    }
}

/// Fixed attack: bus ids and offsets in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedAttack {
    pub buses: Vec<u32>,
    pub angles: Vec<f64>,
}

/// A fraction of PMUs attacked per realization, offsets uniform in `angle_range` degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomAttack {
    pub random: f64,
    pub angle_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackSpec {
    Fixed(FixedAttack),
    Random(RandomAttack),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub sigma_v: f64,
    pub sigma_i: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_v: crate::pmu::SIGMA_V,
            sigma_i: crate::pmu::SIGMA_I,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// AM relative objective change ε.
    pub am: f64,
    pub am_max_iterations: usize,
    pub lnrt_threshold: f64,
    /// Estimated offsets above this magnitude (degrees) are reported as attacked.
    pub attacked_threshold_deg: f64,
    pub gauss_newton: f64,
    pub gauss_newton_max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            am: 0.01,
            am_max_iterations: 200,
            lnrt_threshold: crate::lnrt::DEFAULT_THRESHOLD,
            attacked_threshold_deg: 3.0,
            gauss_newton: 1e-8,
            gauss_newton_max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VulnerabilitySpec {
    pub n_p: usize,
    pub bound_deg: f64,
    pub subset_cap: u64,
    /// Greedy only: solve each 1-D stage by a grid scan with this spacing (degrees).
    pub grid_step_deg: Option<f64>,
}

impl Default for VulnerabilitySpec {
    fn default() -> Self {
        VulnerabilitySpec {
            n_p: 1,
            bound_deg: crate::vulnerability::DEFAULT_BOUND_DEG,
            subset_cap: crate::vulnerability::DEFAULT_SUBSET_CAP,
            grid_step_deg: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScadaSpec {
    pub fraction: f64,
    pub sigma_vmag: f64,
    pub sigma_flow: f64,
    /// Channel selection seed; the selection stays fixed for the whole experiment.
    pub seed: u64,
    /// Add a PMU at the slack bus for hybrid runs.
    pub slack_pmu: bool,
}

impl Default for ScadaSpec {
    fn default() -> Self {
        ScadaSpec {
            fraction: 0.5,
            sigma_vmag: crate::scada::SIGMA_VMAG,
            sigma_flow: crate::scada::SIGMA_FLOW,
            seed: 1,
            slack_pmu: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case_path: PathBuf,
    pub placement_path: PathBuf,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub load_scale: Option<f64>,
    #[serde(default)]
    pub load_profile: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub monte_carlo: usize,
    #[serde(default)]
    pub seed: u64,
    pub method: Method,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "auto")]
    pub covariance_mode: CovarianceMode,
    #[serde(default)]
    pub vulnerability: VulnerabilitySpec,
    #[serde(default)]
    pub scada: ScadaSpec,
}

fn one() -> usize {
    1
}

fn auto() -> CovarianceMode {
    CovarianceMode::Auto
}

impl ExperimentConfig {
    pub fn new(case_path: impl Into<PathBuf>, placement_path: impl Into<PathBuf>, method: Method) -> Self {
        ExperimentConfig {
            case_path: case_path.into(),
            placement_path: placement_path.into(),
            attack: None,
            noise: NoiseSpec::default(),
            load_scale: None,
            load_profile: None,
            monte_carlo: 1,
            seed: 0,
            method,
            tolerances: Tolerances::default(),
            covariance_mode: CovarianceMode::Auto,
            vulnerability: VulnerabilitySpec::default(),
            scada: ScadaSpec::default(),
        }
    }

    /// Parses a JSON config; relative paths are taken relative to `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut cfg.case_path, &mut cfg.placement_path] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base).map_err(|e| e.context(format!("config {}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load_scales(&self) -> Vec<f64> {
        match (&self.load_profile, self.load_scale) {
            (Some(p), _) => p.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => vec![1.0],
        }
    }

    pub fn am_config(&self, tolerance: f64) -> AmConfig {
        AmConfig {
            tolerance,
            max_iterations: self.tolerances.am_max_iterations,
            covariance_mode: self.covariance_mode,
            ..AmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.load_scale.is_some() && self.load_profile.is_some() {
            return bad("load_scale and load_profile are mutually exclusive".into());
        }
        let scales = self.load_scales();
        if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad(format!("load scales must be positive, got {scales:?}"));
        }
        if self.monte_carlo == 0 {
            return bad("monte_carlo must be at least 1".into());
        }
        if !(self.noise.sigma_v > 0.0 && self.noise.sigma_i > 0.0) {
            return bad("noise standard deviations must be positive".into());
        }
        let t = &self.tolerances;
        if !(t.am >= 0.0) || t.am_max_iterations == 0 || !(t.lnrt_threshold > 0.0) || !(t.gauss_newton > 0.0) {
            return bad("tolerances must be positive".into());
        }
        match &self.attack {
            Some(AttackSpec::Fixed(f)) => {
                if f.buses.len() != f.angles.len() {
                    return bad(format!(
                        "attack lists {} buses but {} angles",
                        f.buses.len(),
                        f.angles.len()
                    ));
                }
                if f.angles.iter().any(|a| !a.is_finite()) {
                    return bad("attack angles must be finite".into());
                }
            }
            Some(AttackSpec::Random(r)) => {
                if !(r.random >= 0.0 && r.random <= 1.0) {
                    return bad(format!("random attack fraction must be in [0, 1], got {}", r.random));
                }
                if !(r.angle_range[0] <= r.angle_range[1]) {
                    return bad("angle_range must be [low, high]".into());
                }
            }
            None => {}
        }
        let v = &self.vulnerability;
        if self.method.is_vulnerability() && (v.n_p == 0 || !(v.bound_deg >= 0.0)) {
            return bad("vulnerability needs n_p ≥ 1 and a non-negative bound".into());
        }
        if let Some(g) = v.grid_step_deg {
            if !(g > 0.0) {
                return bad("grid_step_deg must be positive".into());
            }
        }
        let s = &self.scada;
        if self.method == Method::AmHybrid
            && !(s.fraction > 0.0 && s.fraction <= 1.0 && s.sigma_vmag > 0.0 && s.sigma_flow > 0.0)
        {
            return bad("scada needs fraction in (0, 1] and positive sigmas".into());
        }
        Ok(())
    }
}

/// One Monte-Carlo realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationRecord {
    pub load_scale: f64,
    pub realization: usize,
    pub seed: u64,
    pub relative_state_error: f64,
    pub relative_angle_error: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: bool,
    pub removed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub load_scale: f64,
    pub iteration: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub load_scale: f64,
    pub realization: usize,
    pub round: usize,
    pub bus: u32,
    pub row: usize,
    pub normalized_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityRow {
    pub load_scale: f64,
    pub rank: usize,
    pub buses: Vec<u32>,
    pub delta_theta_deg: Vec<f64>,
    pub objective: f64,
}

/// Per-PMU estimated offsets aggregated over realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleRow {
    pub bus: u32,
    pub mean_true_deg: f64,
    pub mean_estimated_deg: f64,
    /// Share of realizations with |Δθ̂| above the attacked threshold.
    pub flagged_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub case: String,
    pub n_bus: usize,
    pub pmu_count: usize,
    pub realizations: usize,
    pub load_scales: Vec<f64>,
    pub relative_state_error: Option<f64>,
    pub relative_angle_error: Option<f64>,
    pub converged: usize,
    pub mean_iterations: Option<f64>,
    pub mean_removed: Option<f64>,
    pub most_vulnerable: Vec<VulnerabilityRow>,
    pub per_bus_angles: Vec<AngleRow>,
    pub wall_time_s: f64,
}

/// Everything a run produces, echoing the resolved configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub slack_bus: u32,
    pub pmu_buses: Vec<u32>,
    /// Per load scale, the fixed SCADA channel selection (hybrid runs only).
    pub scada_channels: Vec<Vec<ScadaChannel>>,
    pub vulnerability_bounds_deg: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub summary: RunSummary,
    pub realizations: Vec<RealizationRecord>,
    pub trace: Vec<TracePoint>,
    pub removals: Vec<RemovalRecord>,
    pub vulnerability: Vec<VulnerabilityRow>,
    pub manifest: Manifest,
}

struct Setup {
    case: NetworkCase,
    adm: AdmittanceModel,
    placement: PmuPlacement,
    slack: usize,
}

fn load_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let case = load_case(&cfg.case_path).map_err(|e| e.context(format!("case {}", cfg.case_path.display())))?;
    let adm = build_admittance(&case)?;
    let text = fs::read_to_string(&cfg.placement_path).map_err(|e| Error::io(&cfg.placement_path, e))?;
    let placement = PmuPlacement::parse(&text, &case)
        .map_err(|e| e.context(format!("placement {}", cfg.placement_path.display())))?;
    let slack = case.slack_index();
    Ok(Setup {
        case,
        adm,
        placement,
        slack,
    })
}

/// Scale-specific state shared by all realizations.
struct ScaleContext {
    scale: f64,
    model: PmuModel,
    gain: Option<GainMatrix>,
    /// Full profile with the slack angle rotated to zero.
    v_full: DVector<f64>,
    /// The same profile in the model's (reduced) state.
    v: DVector<f64>,
    scada: Vec<ScadaChannel>,
}

fn fixed_attack(setup: &Setup, f: &FixedAttack) -> Result<AttackScenario> {
    let mut list = Vec::with_capacity(f.buses.len());
    for (&b, &deg) in f.buses.iter().zip(&f.angles) {
        list.push((setup.case.bus_index_or_err(b)?, deg.to_radians()));
    }
    AttackScenario::from_angles(setup.case.n_bus(), &list)
}

fn draw_attack<R: Rng + ?Sized>(model: &PmuModel, r: &RandomAttack, rng: &mut R) -> Result<AttackScenario> {
    let nu = model.units.len();
    let k = ((r.random * nu as f64).round() as usize).min(nu);
    let mut picked = sample(rng, nu, k).into_vec();
    picked.sort_unstable();
    let [lo, hi] = r.angle_range;
    let list: Vec<(usize, f64)> = picked
        .into_iter()
        .map(|u| {
            let deg = if hi > lo { rng.random_range(lo..hi) } else { lo };
            (model.units[u].bus, deg.to_radians())
        })
        .collect();
    AttackScenario::from_angles(model.n_bus, &list)
}

fn scale_context(cfg: &ExperimentConfig, setup: &Setup, scale: f64) -> Result<ScaleContext> {
    let pf = solve_power_flow(&setup.case, scale, &PowerFlowOptions::default())
        .map_err(|e| e.context(format!("power flow at load scale {scale}")))?;
    let prof = pf.profile.rotated(-pf.profile.phasor(setup.slack).arg());
    let mut placement = setup.placement.clone();
    if cfg.method == Method::AmHybrid && cfg.scada.slack_pmu {
        placement.a[setup.slack] = true;
    }
    let model = build_pmu_model(&setup.adm, &placement, cfg.noise.sigma_v, cfg.noise.sigma_i)?
        .reduced(setup.slack)?;
    let v = model.reduce_state(&prof.v);
    let scada = if cfg.method == Method::AmHybrid {
        select_channels(
            &setup.adm,
            setup.slack,
            &prof.v,
            cfg.scada.fraction,
            (cfg.scada.sigma_vmag, cfg.scada.sigma_flow),
            cfg.scada.seed,
        )?
    } else {
        Vec::new()
    };
    // The hybrid gain includes the SCADA prior; the PMU-only one may be singular.
    let gain = if cfg.method == Method::AmHybrid {
        None
    } else {
        Some(GainMatrix::new(&model)?)
    };
    Ok(ScaleContext {
        scale,
        model,
        gain,
        v_full: prof.v,
        v,
        scada,
    })
}

struct Outcome {
    record: RealizationRecord,
    angles: Option<(Vec<f64>, Vec<f64>)>,
    trace: Vec<f64>,
    removals: Vec<RemovalRecord>,
}

fn run_realization(cfg: &ExperimentConfig, setup: &Setup, ctx: &ScaleContext, i: usize) -> Result<Outcome> {
    let seed = cfg.seed.wrapping_add(i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attack = match &cfg.attack {
        None => AttackScenario::none(ctx.model.n_bus),
        Some(AttackSpec::Fixed(f)) => fixed_attack(setup, f)?,
        Some(AttackSpec::Random(r)) => draw_attack(&ctx.model, r, &mut rng)?,
    };
    let z = simulate_with_rng(&ctx.model, &ctx.v, &attack, &mut rng)?;
    let truth_angles = attack.per_unit(&ctx.model);
    let am_cfg = cfg.am_config(cfg.tolerances.am);
    let mut record = RealizationRecord {
        load_scale: ctx.scale,
        realization: i,
        seed,
        relative_state_error: 0.0,
        relative_angle_error: None,
        iterations: None,
        converged: true,
        removed: None,
    };
    let mut out = Outcome {
        record: record.clone(),
        angles: None,
        trace: Vec::new(),
        removals: Vec::new(),
    };
    let v_hat = match cfg.method {
        Method::Ml => estimate_ml(&ctx.model, ctx.gain.as_ref().expect("gain"), &z)?,
        Method::Am | Method::AmHybrid => {
            let r = if cfg.method == Method::Am {
                run_am_with_gain(&ctx.model, ctx.gain.as_ref().expect("gain"), &z, &am_cfg)?
            } else {
                let mut srng = ChaCha8Rng::seed_from_u64(seed);
                srng.set_stream(1);
                let sm = simulate_scada(
                    &setup.adm,
                    setup.slack,
                    &ctx.scada,
                    &ctx.v_full,
                    (cfg.scada.sigma_vmag, cfg.scada.sigma_flow),
                    &mut srng,
                )?;
                let gn = GaussNewtonOptions {
                    tolerance: cfg.tolerances.gauss_newton,
                    max_iterations: cfg.tolerances.gauss_newton_max_iterations,
                    ..GaussNewtonOptions::default()
                };
                let prior = estimate_scada(&setup.adm, setup.slack, &sm, &gn)?;
                run_am_hybrid(&ctx.model, &z, &prior.v_s_hat, &prior.precision, &am_cfg)?
            };
            record.iterations = Some(r.iterations);
            record.converged = r.converged;
            if truth_angles.iter().any(|&a| a != 0.0) {
                record.relative_angle_error = Some(relative_angle_error(&r.delta_theta_hat, &truth_angles));
            }
            out.angles = Some((truth_angles, r.delta_theta_hat.clone()));
            out.trace = r.objective_trace;
            r.v_hat
        }
        Method::Lnrt => {
            let r = run_lnrt(&ctx.model, &z, cfg.tolerances.lnrt_threshold)?;
            record.iterations = Some(r.rounds);
            record.removed = Some(r.removed.len());
            out.removals = r
                .removed
                .iter()
                .enumerate()
                .map(|(round, c)| RemovalRecord {
                    load_scale: ctx.scale,
                    realization: i,
                    round: round + 1,
                    bus: c.bus,
                    row: c.row,
                    normalized_residual: c.normalized_residual,
                })
                .collect();
            r.v_hat
        }
        Method::VulnOptimal | Method::VulnGreedy => unreachable!("handled by run_vulnerability"),
    };
    record.relative_state_error = relative_error(&v_hat, &ctx.v);
    out.record = record;
    Ok(out)
}

fn run_vulnerability(cfg: &ExperimentConfig, setup: &Setup, scale: f64) -> Result<VulnerabilityResult> {
    let pf = solve_power_flow(&setup.case, scale, &PowerFlowOptions::default())
        .map_err(|e| e.context(format!("power flow at load scale {scale}")))?;
    let model = build_pmu_model(&setup.adm, &setup.placement, cfg.noise.sigma_v, cfg.noise.sigma_i)?;
    let gain = GainMatrix::new(&model)?;
    let land = BiasLandscape::new(&model, &gain, &pf.profile.v)?;
    let bounds = uniform_bounds(setup.case.n_bus(), cfg.vulnerability.bound_deg);
    let opts = AscentOptions::default();
    let v = &cfg.vulnerability;
    match cfg.method {
        Method::VulnOptimal => find_vulnerable_optimal(&land, setup.case.n_bus(), v.n_p, &bounds, v.subset_cap, &opts),
        _ => find_vulnerable_greedy(
            &land,
            setup.case.n_bus(),
            v.n_p,
            &bounds,
            v.grid_step_deg.map(f64::to_radians),
            &opts,
        ),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs a configured experiment. Results are deterministic given the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let setup = load_setup(cfg)?;
    let scales = cfg.load_scales();
    let mut realizations = Vec::new();
    let mut trace = Vec::new();
    let mut removals = Vec::new();
    let mut vulnerability = Vec::new();
    let mut most_vulnerable = Vec::new();
    let mut scada_channels = Vec::new();
    let mut angle_acc: Vec<(u32, f64, f64, usize)> = Vec::new();
    let mut angle_count = 0usize;
    let mut pmu_count = setup.placement.count();

    for &scale in &scales {
        if cfg.method.is_vulnerability() {
            let res = run_vulnerability(cfg, &setup, scale)?;
            for (rank, c) in res.ranked().into_iter().enumerate() {
                vulnerability.push(VulnerabilityRow {
                    load_scale: scale,
                    rank: rank + 1,
                    buses: c.buses.clone(),
                    delta_theta_deg: c.delta_theta.iter().map(|t| t.to_degrees()).collect(),
                    objective: c.objective,
                });
            }
            most_vulnerable.push(VulnerabilityRow {
                load_scale: scale,
                rank: 1,
                buses: res.attacked_buses.clone(),
                delta_theta_deg: res.delta_theta_star.iter().map(|t| t.to_degrees()).collect(),
                objective: res.objective,
            });
            continue;
        }
        let ctx = scale_context(cfg, &setup, scale)?;
        pmu_count = ctx.model.units.len();
        if angle_acc.is_empty() {
            angle_acc = ctx.model.units.iter().map(|u| (u.bus_id, 0.0, 0.0, 0)).collect();
        }
        let outcomes: Vec<Outcome> = (0..cfg.monte_carlo)
            .into_par_iter()
            .map(|i| {
                run_realization(cfg, &setup, &ctx, i)
                    .map_err(|e| e.context(format!("load scale {scale}, realization {i}")))
            })
            .collect::<Result<_>>()?;
        let threshold = cfg.tolerances.attacked_threshold_deg.to_radians();
        for (i, o) in outcomes.into_iter().enumerate() {
            if i == 0 {
                trace.extend(o.trace.iter().enumerate().map(|(it, &f)| TracePoint {
                    load_scale: scale,
                    iteration: it,
                    objective: f,
                }));
            }
            if let Some((truth, est)) = &o.angles {
                angle_count += 1;
                for (a, (t, e)) in angle_acc.iter_mut().zip(truth.iter().zip(est)) {
                    a.1 += t;
                    a.2 += e;
                    a.3 += usize::from(e.abs() > threshold);
                }
            }
            removals.extend(o.removals);
            realizations.push(o.record);
        }
        scada_channels.push(ctx.scada);
    }

    let per_bus_angles = if angle_count > 0 {
        let n = angle_count as f64;
        angle_acc
            .into_iter()
            .map(|(bus, t, e, f)| AngleRow {
                bus,
                mean_true_deg: (t / n).to_degrees(),
                mean_estimated_deg: (e / n).to_degrees(),
                flagged_fraction: f as f64 / n,
            })
            .collect()
    } else {
        Vec::new()
    };
    let summary = RunSummary {
        method: cfg.method,
        case: cfg.case_path.display().to_string(),
        n_bus: setup.case.n_bus(),
        pmu_count,
        realizations: realizations.len(),
        load_scales: scales,
        relative_state_error: mean(realizations.iter().map(|r| r.relative_state_error)),
        relative_angle_error: mean(realizations.iter().filter_map(|r| r.relative_angle_error)),
        converged: realizations.iter().filter(|r| r.converged).count(),
        mean_iterations: mean(realizations.iter().filter_map(|r| r.iterations.map(|x| x as f64))),
        mean_removed: mean(realizations.iter().filter_map(|r| r.removed.map(|x| x as f64))),
        most_vulnerable,
        per_bus_angles,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let mut pmu_buses: Vec<u32> = setup.placement.pmu_buses().iter().map(|&k| setup.case.buses[k].id).collect();
    if cfg.method == Method::AmHybrid && cfg.scada.slack_pmu && !setup.placement.a[setup.slack] {
        pmu_buses.push(setup.case.buses[setup.slack].id);
        pmu_buses.sort_unstable();
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        slack_bus: setup.case.buses[setup.slack].id,
        pmu_buses,
        scada_channels,
        vulnerability_bounds_deg: cfg.method.is_vulnerability().then_some(cfg.vulnerability.bound_deg),
    };
    Ok(ExperimentReport {
        summary,
        realizations,
        trace,
        removals,
        vulnerability,
        manifest,
    })
}

/// One row of a method comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub relative_state_error: Option<f64>,
    pub relative_angle_error: Option<f64>,
    pub mean_wall_time_s: f64,
}

/// Runs each config and tabulates mean errors. The configs must describe the same scenario.
pub fn compare_methods(configs: &[ExperimentConfig]) -> Result<(Vec<ComparisonRow>, Vec<ExperimentReport>)> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Config("compare needs at least one configuration".into()))?;
    for c in &configs[1..] {
        let same = c.case_path == first.case_path
            && c.placement_path == first.placement_path
            && c.attack == first.attack
            && c.monte_carlo == first.monte_carlo
            && c.seed == first.seed
            && c.load_scales() == first.load_scales();
        if !same {
            return Err(Error::Config(format!(
                "method {} does not share the scenario (case, placement, attack, monte_carlo, seed, load) of method {}",
                c.method.name(),
                first.method.name()
            )));
        }
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for c in configs {
        let rep = run_experiment(c)?;
        let n = rep.summary.realizations.max(1) as f64;
        rows.push(ComparisonRow {
            method: c.method,
            relative_state_error: rep.summary.relative_state_error,
            relative_angle_error: rep.summary.relative_angle_error,
            mean_wall_time_s: rep.summary.wall_time_s / n,
        });
        reports.push(rep);
    }
    Ok((rows, reports))
}

fn join_u32(v: &[u32]) -> String {
    v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the report into `dir`. Everything except `summary.json`, which carries wall time, is deterministic.
pub fn write_report(dir: &Path, rep: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&rep.manifest)?)?;
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&rep.summary)?)?;
    let s = &rep.summary;
    write_csv(
        &dir.join("summary.csv"),
        &[
            "method",
            "realizations",
            "relative_state_error",
            "relative_angle_error",
            "converged",
            "mean_iterations",
        ],
        std::iter::once(vec![
            s.method.name().to_string(),
            s.realizations.to_string(),
            opt(s.relative_state_error.map(|x| format!("{x:.12e}"))),
            opt(s.relative_angle_error.map(|x| format!("{x:.12e}"))),
            s.converged.to_string(),
            opt(s.mean_iterations.map(|x| format!("{x:.3}"))),
        ]),
    )?;
    if rep.manifest.config.method.is_vulnerability() {
        write_csv(
            &dir.join("vulnerability.csv"),
            &["load_scale", "rank", "buses", "delta_theta_deg", "objective"],
            rep.vulnerability.iter().map(|r| {
                vec![
                    r.load_scale.to_string(),
                    r.rank.to_string(),
                    join_u32(&r.buses),
                    join_f64(&r.delta_theta_deg),
                    format!("{:.12e}", r.objective),
                ]
            }),
        )?;
        return Ok(());
    }
    write_csv(
        &dir.join("realizations.csv"),
        &[
            "load_scale",
            "realization",
            "seed",
            "relative_state_error",
            "relative_angle_error",
            "iterations",
            "converged",
            "removed",
        ],
        rep.realizations.iter().map(|r| {
            vec![
                r.load_scale.to_string(),
                r.realization.to_string(),
                r.seed.to_string(),
                format!("{:.12e}", r.relative_state_error),
                opt(r.relative_angle_error.map(|x| format!("{x:.12e}"))),
                opt(r.iterations),
                r.converged.to_string(),
                opt(r.removed),
            ]
        }),
    )?;
    if !rep.trace.is_empty() {
        write_csv(
            &dir.join("am_trace.csv"),
            &["load_scale", "iteration", "objective"],
            rep.trace
                .iter()
                .map(|t| vec![t.load_scale.to_string(), t.iteration.to_string(), format!("{:.12e}", t.objective)]),
        )?;
    }
    if !rep.summary.per_bus_angles.is_empty() {
        write_csv(
            &dir.join("angles.csv"),
            &["bus", "mean_true_deg", "mean_estimated_deg", "flagged_fraction"],
            rep.summary.per_bus_angles.iter().map(|a| {
                vec![
                    a.bus.to_string(),
                    format!("{:.6}", a.mean_true_deg),
                    format!("{:.6}", a.mean_estimated_deg),
                    format!("{:.4}", a.flagged_fraction),
                ]
            }),
        )?;
    }
    if rep.manifest.config.method == Method::Lnrt {
        write_csv(
            &dir.join("lnrt_removed.csv"),
            &["load_scale", "realization", "round", "bus", "row", "normalized_residual"],
            rep.removals.iter().map(|r| {
                vec![
                    r.load_scale.to_string(),
                    r.realization.to_string(),
                    r.round.to_string(),
                    r.bus.to_string(),
                    r.row.to_string(),
                    format!("{:.6}", r.normalized_residual),
                ]
            }),
        )?;
    }
    Ok(())
}

/// Writes `comparison.csv` plus one sub-directory per method.
pub fn write_comparison(dir: &Path, rows: &[ComparisonRow], reports: &[ExperimentReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join("comparison.csv"),
        &["method", "relative_state_error", "relative_angle_error"],
        rows.iter().map(|r| {
            vec![
                r.method.name().to_string(),
                opt(r.relative_state_error.map(|x| format!("{x:.12e}"))),
                opt(r.relative_angle_error.map(|x| format!("{x:.12e}"))),
            ]
        }),
    )?;
    write_text(&dir.join("comparison.json"), &serde_json::to_string_pretty(rows)?)?;
    for rep in reports {
        write_report(&dir.join(rep.manifest.config.method.name()), rep)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_fields() {
        let text = r#"{"case_path": "a", "placement_path": "b", "method": "am", "bogus": 1}"#;
        assert!(matches!(ExperimentConfig::from_json(text, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn config_parses_both_attack_forms() {
        let fixed = r#"{"case_path": "a", "placement_path": "b", "method": "am",
            "attack": {"buses": [2, 14], "angles": [60, 70]}}"#;
        let c = ExperimentConfig::from_json(fixed, Path::new("/x")).unwrap();
        assert!(matches!(c.attack, Some(AttackSpec::Fixed(_))));
        assert_eq!(c.case_path, PathBuf::from("/x/a"));
        let random = r#"{"case_path": "a", "placement_path": "b", "method": "am",
            "attack": {"random": 0.2, "angle_range": [-60, 60]}}"#;
        let c = ExperimentConfig::from_json(random, Path::new(".")).unwrap();
        assert!(matches!(c.attack, Some(AttackSpec::Random(_))));
    }

    #[test]
    fn config_checks_consistency() {
        let mut c = ExperimentConfig::new("a", "b", Method::Am);
        c.attack = Some(AttackSpec::Fixed(FixedAttack {
            buses: vec![2],
            angles: vec![],
        }));
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ExperimentConfig::new("a", "b", Method::Am);
        c.load_scale = Some(1.0);
        c.load_profile = Some(vec![1.0]);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new("a", "b", Method::Am);
        c.monte_carlo = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = ExperimentConfig::new("/a", "/b", Method::AmHybrid);
        c.load_profile = Some(vec![0.5, 1.0]);
        let back = ExperimentConfig::from_json(&c.to_json(), Path::new(".")).unwrap();
        assert_eq!(back, c);
    }
}
