use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use tsa_core::am::{run_am_with_gain, CovarianceMode};
use tsa_core::error::{Error, ErrorClass, Result};
use tsa_core::estimation::{estimate_ml, GainMatrix};
use tsa_core::experiment::{
    compare_methods, run_experiment, write_comparison, write_report, AttackSpec, ExperimentConfig, FixedAttack,
    Method, RandomAttack,
};
use tsa_core::lnrt::run_lnrt;
use tsa_core::netcase::{build_admittance, load_case, solve_power_flow, NetworkCase, PowerFlowOptions};
use tsa_core::pmu::{build_pmu_model, simulate_measurements, AttackScenario, MeasurementSet, PmuModel, PmuPlacement};

#[derive(Parser)]
#[command(name = "tsa", version, about = "PMU state estimation under time-synchronization attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the AC power flow and print bus voltages.
    Pf {
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        load_scale: f64,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate one PMU measurement set and write it as JSON.
    Simulate {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plain weighted least squares (attack-unaware).
    Estimate(RunArgs),
    /// Alternating minimization over the state and attack angles.
    Am(RunArgs),
    /// Alternating minimization with a SCADA prior.
    AmHybrid(RunArgs),
    /// Largest normalized residual test.
    Lnrt(RunArgs),
    /// Search for the most vulnerable PMU locations.
    Vuln {
        #[command(flatten)]
        scenario: Scenario,
        /// Greedy search instead of exhaustive subsets.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        n_p: Option<usize>,
        /// Symmetric bound on each offset, degrees.
        #[arg(long)]
        bound_deg: Option<f64>,
        #[arg(long)]
        subset_cap: Option<u64>,
        #[arg(long)]
        grid_step_deg: Option<f64>,
    },
    /// Run several methods on the same scenario and tabulate their errors.
    Compare {
        #[command(flatten)]
        scenario: Scenario,
        /// Comma-separated methods, e.g. am,lnrt.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Extra configuration files, one per method; they override --methods.
        #[arg(long = "configs", num_args = 1..)]
        configs: Vec<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Scenario {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    placement: Option<PathBuf>,
    /// Fixed attack as bus:degrees pairs, e.g. 2:60,14:70.
    #[arg(long, conflicts_with = "random_attack")]
    attack: Option<String>,
    /// Fraction of PMUs attacked in each realization.
    #[arg(long)]
    random_attack: Option<f64>,
    /// Range of random offsets, degrees.
    #[arg(long, num_args = 2, allow_negative_numbers = true)]
    angle_range: Option<Vec<f64>>,
    #[arg(long)]
    sigma_v: Option<f64>,
    #[arg(long)]
    sigma_i: Option<f64>,
    #[arg(long)]
    load_scale: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    load_profile: Option<Vec<f64>>,
    #[arg(long)]
    monte_carlo: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// AM relative objective tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    lnrt_threshold: Option<f64>,
    /// auto, diagonal or general.
    #[arg(long)]
    covariance_mode: Option<String>,
    #[arg(long)]
    scada_fraction: Option<f64>,
    #[arg(long)]
    scada_seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: Scenario,
    /// Estimate from a saved measurement set instead of running Monte-Carlo.
    #[arg(long)]
    measurements: Option<PathBuf>,
}

fn parse_attack(text: &str) -> Result<FixedAttack> {
    let mut buses = Vec::new();
    let mut angles = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (b, a) = item
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("attack entry `{item}` is not bus:degrees")))?;
        buses.push(b.trim().parse().map_err(|_| Error::Config(format!("bad bus id `{b}`")))?);
        angles.push(a.trim().parse().map_err(|_| Error::Config(format!("bad angle `{a}`")))?);
    }
    Ok(FixedAttack { buses, angles })
}

fn parse_json_enum<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(text.replace('-', "_")))
        .map_err(|_| Error::Config(format!("unknown {what} `{text}`")))
}

impl Scenario {
    fn resolve(&self, method: Method) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let case = self.case.clone().ok_or_else(|| Error::Config("--case or --config is required".into()))?;
                let placement = self
                    .placement
                    .clone()
                    .ok_or_else(|| Error::Config("--placement or --config is required".into()))?;
                ExperimentConfig::new(case, placement, method)
            }
        };
        cfg.method = method;
        if let Some(p) = &self.case {
            cfg.case_path = p.clone();
        }
        if let Some(p) = &self.placement {
            cfg.placement_path = p.clone();
        }
        if let Some(a) = &self.attack {
            cfg.attack = Some(AttackSpec::Fixed(parse_attack(a)?));
        }
        if let Some(f) = self.random_attack {
            let range = match (&self.angle_range, &cfg.attack) {
                (Some(r), _) => [r[0], r[1]],
                (None, Some(AttackSpec::Random(r))) => r.angle_range,
                _ => [-60.0, 60.0],
            };
            cfg.attack = Some(AttackSpec::Random(RandomAttack {
                random: f,
                angle_range: range,
            }));
        } else if let (Some(r), Some(AttackSpec::Random(ra))) = (&self.angle_range, &mut cfg.attack) {
            ra.angle_range = [r[0], r[1]];
        }
        if let Some(s) = self.sigma_v {
            cfg.noise.sigma_v = s;
        }
        if let Some(s) = self.sigma_i {
            cfg.noise.sigma_i = s;
        }
        if let Some(s) = self.load_scale {
            cfg.load_scale = Some(s);
            cfg.load_profile = None;
        }
        if let Some(p) = &self.load_profile {
            cfg.load_profile = Some(p.clone());
            cfg.load_scale = None;
        }
        if let Some(n) = self.monte_carlo {
            cfg.monte_carlo = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.tolerance {
            cfg.tolerances.am = t;
        }
        if let Some(m) = self.max_iterations {
            cfg.tolerances.am_max_iterations = m;
        }
        if let Some(t) = self.lnrt_threshold {
            cfg.tolerances.lnrt_threshold = t;
        }
        if let Some(m) = &self.covariance_mode {
            cfg.covariance_mode = parse_json_enum::<CovarianceMode>("covariance mode", &m.to_lowercase())?;
        }
        if let Some(f) = self.scada_fraction {
            cfg.scada.fraction = f;
        }
        if let Some(s) = self.scada_seed {
            cfg.scada.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Model shared by `simulate` and single-shot estimation: slack angle fixed at zero.
fn reduced_model(cfg: &ExperimentConfig) -> Result<(NetworkCase, PmuModel)> {
    let case = load_case(&cfg.case_path)?;
    let adm = build_admittance(&case)?;
    let text = fs::read_to_string(&cfg.placement_path).map_err(|e| Error::io(&cfg.placement_path, e))?;
    let placement = PmuPlacement::parse(&text, &case)?;
    let model = build_pmu_model(&adm, &placement, cfg.noise.sigma_v, cfg.noise.sigma_i)?.reduced(case.slack_index())?;
    Ok((case, model))
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_pf(case: &Path, scale: f64, out: Option<&Path>) -> Result<()> {
    let c = load_case(case)?;
    let pf = solve_power_flow(&c, scale, &PowerFlowOptions::default())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bus", "vm", "va_deg"])?;
    for (k, b) in c.buses.iter().enumerate() {
        let p = pf.profile.phasor(k);
        w.write_record([b.id.to_string(), format!("{:.8}", p.norm()), format!("{:.6}", p.arg().to_degrees())])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    let text = String::from_utf8(bytes).expect("csv output is UTF-8");
    match out {
        Some(p) => write_out(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_simulate(s: &Scenario, out: &Path) -> Result<()> {
    let cfg = s.resolve(Method::Ml)?;
    let (case, model) = reduced_model(&cfg)?;
    let scale = cfg.load_scales()[0];
    let pf = solve_power_flow(&case, scale, &PowerFlowOptions::default())?;
    let slack = case.slack_index();
    let v = model.reduce_state(&pf.profile.rotated(-pf.profile.phasor(slack).arg()).v);
    let attack = match &cfg.attack {
        None => AttackScenario::none(case.n_bus()),
        Some(AttackSpec::Fixed(f)) => {
            let list = f
                .buses
                .iter()
                .zip(&f.angles)
                .map(|(&b, &a)| Ok((case.bus_index_or_err(b)?, a.to_radians())))
                .collect::<Result<Vec<_>>>()?;
            AttackScenario::from_angles(case.n_bus(), &list)?
        }
        Some(AttackSpec::Random(_)) => {
            return Err(Error::Config("simulate takes a fixed --attack".into()));
        }
    };
    let z = simulate_measurements(&model, &v, &attack, cfg.seed)?;
    write_out(out, &z.to_json())?;
    eprintln!("wrote {} ({} PMUs)", out.display(), model.units.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct SingleShot {
    method: Method,
    bus: Vec<u32>,
    vm: Vec<f64>,
    va_deg: Vec<f64>,
    /// Per PMU bus, degrees.
    delta_theta_deg: Option<Vec<(u32, f64)>>,
    iterations: Option<usize>,
    removed: Option<Vec<(u32, usize)>>,
}

fn single_shot(cfg: &ExperimentConfig, path: &Path, out_dir: &Path) -> Result<()> {
    let (case, model) = reduced_model(cfg)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let z = MeasurementSet::from_json(&text)?;
    let mut shot = SingleShot {
        method: cfg.method,
        bus: case.bus_ids(),
        vm: Vec::new(),
        va_deg: Vec::new(),
        delta_theta_deg: None,
        iterations: None,
        removed: None,
    };
    let x: DVector<f64> = match cfg.method {
        Method::Ml => estimate_ml(&model, &GainMatrix::new(&model)?, &z)?,
        Method::Am => {
            let r = run_am_with_gain(&model, &GainMatrix::new(&model)?, &z, &cfg.am_config(cfg.tolerances.am))?;
            shot.iterations = Some(r.iterations);
            shot.delta_theta_deg = Some(
                model
                    .units
                    .iter()
                    .zip(&r.delta_theta_hat)
                    .map(|(u, t)| (u.bus_id, t.to_degrees()))
                    .collect(),
            );
            r.v_hat
        }
        Method::Lnrt => {
            let r = run_lnrt(&model, &z, cfg.tolerances.lnrt_threshold)?;
            shot.iterations = Some(r.rounds);
            shot.removed = Some(r.removed.iter().map(|c| (c.bus, c.row)).collect());
            r.v_hat
        }
        _ => return Err(Error::Config("--measurements works with estimate, am and lnrt".into())),
    };
    let v = model.expand_state(&x);
    let nb = case.n_bus();
    for k in 0..nb {
        let c = num_complex::Complex64::new(v[k], v[nb + k]);
        shot.vm.push(c.norm());
        shot.va_deg.push(c.arg().to_degrees());
    }
    let out = out_dir.join("estimate.json");
    let json = serde_json::to_string_pretty(&shot)?;
    println!("{json}");
    write_out(&out, &json)
}

fn cmd_run(args: &RunArgs, method: Method) -> Result<()> {
    let cfg = args.scenario.resolve(method)?;
    if let Some(m) = &args.measurements {
        return single_shot(&cfg, m, &args.scenario.out_dir);
    }
    experiment(&cfg, &args.scenario.out_dir)
}

fn experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let rep = run_experiment(cfg)?;
    write_report(out_dir, &rep)?;
    println!("{}", serde_json::to_string_pretty(&rep.summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pf { case, load_scale, out } => cmd_pf(&case, load_scale, out.as_deref()),
        Command::Simulate { scenario, out } => cmd_simulate(&scenario, &out),
        Command::Estimate(a) => cmd_run(&a, Method::Ml),
        Command::Am(a) => cmd_run(&a, Method::Am),
        Command::AmHybrid(a) => {
            if a.measurements.is_some() {
                return Err(Error::Config("am-hybrid simulates its own SCADA data; drop --measurements".into()));
            }
            cmd_run(&a, Method::AmHybrid)
        }
        Command::Lnrt(a) => cmd_run(&a, Method::Lnrt),
        Command::Vuln {
            scenario,
            greedy,
            n_p,
            bound_deg,
            subset_cap,
            grid_step_deg,
        } => {
            let method = if greedy { Method::VulnGreedy } else { Method::VulnOptimal };
            let mut cfg = scenario.resolve(method)?;
            if let Some(n) = n_p {
                cfg.vulnerability.n_p = n;
            }
            if let Some(b) = bound_deg {
                cfg.vulnerability.bound_deg = b;
            }
            if let Some(c) = subset_cap {
                cfg.vulnerability.subset_cap = c;
            }
            if grid_step_deg.is_some() {
                cfg.vulnerability.grid_step_deg = grid_step_deg;
            }
            cfg.validate()?;
            experiment(&cfg, &scenario.out_dir)
        }
        Command::Compare {
            scenario,
            methods,
            configs,
        } => {
            let cfgs = if configs.is_empty() {
                if methods.is_empty() {
                    return Err(Error::Config("compare needs --methods or --configs".into()));
                }
                methods
                    .iter()
                    .map(|m| scenario.resolve(parse_json_enum("method", m)?))
                    .collect::<Result<Vec<_>>>()?
            } else {
                configs
                    .iter()
                    .map(|p| {
                        let c = ExperimentConfig::load(p)?;
                        Scenario {
                            config: Some(p.clone()),
                            ..scenario.clone()
                        }
                        .resolve(c.method)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let (rows, reports) = compare_methods(&cfgs)?;
            write_comparison(&scenario.out_dir, &rows, &reports)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Numerical => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}
