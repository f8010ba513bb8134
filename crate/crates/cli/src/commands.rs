use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use garch_lrm::hedging::{self, lrm_physical, lrm_physical_tree, Payoff, PhysicalEvaluator};
use garch_lrm::models::{validate_stationarity, GarchState};
use garch_lrm::oracle::{gauss_hermite, verify_mmm, Dynamics};
use garch_lrm::simulate::{ems_adjust, simulate_from, SimOptions};
use garch_lrm::{
    backtest, Error, GarchSpec, Innovations, LatticeSpec, Measure, Representation, StreamKey, Tree,
    TreeSpec,
};

use crate::config::{
    LatticeChoice, MeasureChoice, OracleSection, PayoffChoice, Profile, RepresentationChoice, RunConfig,
};
use crate::GlobalArgs;

#[derive(Debug)]
pub enum CliError {
    Domain(String),
    Config(String),
    Budget(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Config(_) => 2,
            CliError::Budget(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Domain(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Budget(m) => write!(f, "{m} (use --force to run anyway)"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Resource { .. } => CliError::Budget(e.to_string()),
            Error::Io(_) => CliError::Config(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

type Outcome = Result<u8, CliError>;

/// Loads the config and applies the command-line overrides.
fn load(path: &Path, g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(p) = g.profile {
        cfg.profile = Some(p);
    }
    if let Some(out) = &g.out {
        cfg.output = Some(crate::config::OutputSection {
            dir: out.to_string_lossy().into_owned(),
        });
    }
    Ok(cfg)
}

fn spec_of(cfg: &RunConfig) -> Result<GarchSpec, CliError> {
    let spec = cfg.model.to_spec().map_err(CliError::Config)?;
    spec.validate()?;
    Ok(spec)
}

fn out_dir(cfg: &RunConfig) -> Result<Option<PathBuf>, CliError> {
    match &cfg.output {
        Some(o) => {
            let dir = PathBuf::from(&o.dir);
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn validate(path: &Path, g: &GlobalArgs) -> Outcome {
    let cfg = load(path, g)?;
    let spec = spec_of(&cfg)?;
    let r = validate_stationarity(&spec)?;
    let mut s = String::from("quantity,value\n");
    s += &format!("stationary,{}\n", r.stationary);
    s += &format!(
        "long_run_variance,{}\n",
        r.long_run_variance.map(|v| format!("{v:e}")).unwrap_or_default()
    );
    for (m, c) in &r.moment_orders_checked {
        s += &format!("moment_m{m}_spectral_radius,{}\n", c.spectral_radius);
        s += &format!("moment_m{m}_satisfied,{}\n", c.satisfied);
    }
    if let Some(k) = r.kurtosis_finite {
        s += &format!("kurtosis_finite,{k}\n");
    }
    if let Some(k) = r.theoretical_kurtosis {
        s += &format!("theoretical_kurtosis,{k}\n");
    }
    s += &format!("seed,{}\nconfig_hash,{}\n", cfg.seed, cfg.hash());
    print!("{s}");
    if let Some(dir) = out_dir(&cfg)? {
        write_file(&dir.join("validate.csv"), s.as_bytes())?;
    }
    Ok(if r.stationary { 0 } else { 1 })
}

pub struct PriceOverrides {
    pub payoff: Option<PayoffChoice>,
    pub strike: Option<f64>,
    pub maturity: Option<usize>,
    pub n_paths: Option<usize>,
}

pub fn price(path: &Path, g: &GlobalArgs, o: PriceOverrides) -> Outcome {
    let mut cfg = load(path, g)?;
    let spec = spec_of(&cfg)?;
    let mut sec = cfg.price.clone().ok_or_else(|| CliError::Config("config has no [price] section".into()))?;
    if let Some(p) = o.payoff {
        sec.payoff = p;
    }
    if o.strike.is_some() {
        sec.strike = o.strike;
    }
    if let Some(t) = o.maturity {
        sec.maturity = t;
    }
    if let Some(n) = o.n_paths {
        sec.n_paths = n;
    }
    cfg.price = Some(sec.clone());
    let strike = sec.strike.unwrap_or(spec.s0);
    let payoff = match sec.payoff {
        PayoffChoice::Call => Payoff::call(strike),
        PayoffChoice::Put => Payoff::put(strike),
        PayoffChoice::Forward => Payoff::custom(|s| s),
        PayoffChoice::Constant => Payoff::custom(move |_| strike),
    };
    if sec.maturity == 0 || sec.n_paths < 2 {
        return Err(CliError::Config("price.maturity must be >= 1 and price.n_paths >= 2".into()));
    }
    let start = GarchState::initial(&spec)?;
    let key = StreamKey::new(cfg.seed, 0);
    let mut q = simulate_from(
        &spec,
        &start,
        Measure::RiskNeutral,
        sec.n_paths,
        sec.maturity,
        key,
        &SimOptions::default(),
    )?;
    if sec.ems {
        q = ems_adjust(&q)?;
    }
    let (v0, xi1) = hedging::pricerep_estimate(&q, &payoff)?;
    let hash = cfg.hash();
    let mut s = String::from("quantity,estimate,se,seed,config_hash\n");
    let mut row = |name: &str, e: hedging::Estimate| {
        s += &format!("{name},{},{},{},{hash}\n", e.value, e.se, cfg.seed);
    };
    row("value", v0);
    row("xi_1", xi1);
    if sec.payoff == PayoffChoice::Call {
        row("duan_delta_1", hedging::duan_estimate(&q, &payoff)?);
    }
    print!("{s}");
    if let Some(dir) = out_dir(&cfg)? {
        write_file(&dir.join("price.csv"), s.as_bytes())?;
    }
    Ok(0)
}

pub fn backtest(path: &Path, g: &GlobalArgs) -> Outcome {
    let cfg = load(path, g)?;
    spec_of(&cfg)?;
    let profile = cfg.profile.unwrap_or(Profile::Ci);
    let exp = cfg.experiment(profile, g.force).map_err(CliError::Config)?;
    exp.validate()?;
    exp.check_budget()?;
    let report = backtest::run_experiment(&exp)?;
    let hash = cfg.hash();
    let mut csv = Vec::new();
    report.write_csv(&mut csv, Some(&hash))?;
    let table = format!(
        "# seed={} config_hash={} profile={:?}\n{}",
        cfg.seed,
        hash,
        profile,
        report.pivot()
    );
    print!("{table}");
    if let Some(dir) = out_dir(&cfg)? {
        write_file(&dir.join("backtest.csv"), &csv)?;
        write_file(&dir.join("table1.txt"), table.as_bytes())?;
    } else {
        std::io::stdout()
            .write_all(&csv)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(0)
}

struct Check {
    name: String,
    value: f64,
    tolerance: f64,
    passed: bool,
}

pub fn oracle(path: &Path, g: &GlobalArgs) -> Outcome {
    let cfg = load(path, g)?;
    let spec = spec_of(&cfg)?;
    let sec = cfg.oracle.clone().unwrap_or_default();
    let OracleSection {
        lattice,
        depth,
        strike,
        mc_paths,
    } = sec;
    let lattice = match lattice {
        LatticeChoice::Rademacher => LatticeSpec::rademacher(),
        LatticeChoice::ThreePoint => LatticeSpec::three_point(),
    };
    let mut checks = Vec::new();
    let mut push = |name: &str, value: f64, tolerance: f64| {
        checks.push(Check {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        })
    };

    // quadrature moments
    let (x, w) = gauss_hermite(15)?;
    let mut worst: f64 = 0.0;
    for k in 0..30 {
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
        let scale: f64 = (1..(k | 1)).step_by(2).map(|i| i as f64).product();
        let exact = if k % 2 == 1 { 0.0 } else { scale };
        worst = worst.max((m - exact).abs() / scale.max(1.0));
    }
    push("gauss_hermite_moment_error", worst, 1e-10);

    let tree = Tree::build(&spec, &TreeSpec::lattice(&lattice, depth, Dynamics::Physical)?)?;
    push("lattice_mass_error", (tree.total_mass(depth) - 1.0).abs(), 1e-14);

    let call = Payoff::call(strike);
    let strat = lrm_physical_tree(&tree, &spec, &call)?;
    let r = strat.cost_residuals(&tree);
    push("lrm_cost_martingale_residual", r.martingale, 1e-12);
    push("lrm_cost_orthogonality_residual", r.orthogonality, 1e-12);

    // physical MC against the exact tree along one path
    let path: Vec<f64> = (0..depth)
        .map(|k| lattice.support[k % lattice.support.len()])
        .collect();
    let exact = lrm_physical(&spec, &call, &path, &PhysicalEvaluator::Exact(lattice.clone()))?;
    let mc = lrm_physical(
        &spec,
        &call,
        &path,
        &PhysicalEvaluator::MonteCarlo {
            innovations: Innovations::Lattice(lattice.clone()),
            n_paths: mc_paths,
            key: StreamKey::new(cfg.seed, 0),
        },
    )?;
    let xse = mc.xi_se.clone().unwrap_or_default();
    let vse = mc.values_se.clone().unwrap_or_default();
    let z_xi = (0..depth)
        .map(|k| (mc.xi[k] - exact.xi[k]).abs() / xse[k].max(1e-300))
        .fold(0.0, f64::max);
    let z_v = (0..depth)
        .map(|k| (mc.values[k] - exact.values[k]).abs() / vse[k].max(1e-300))
        .fold(0.0, f64::max);
    push("mc_vs_exact_xi_max_z", z_xi, 4.0);
    push("mc_vs_exact_value_max_z", z_v, 4.0);

    let mmm = verify_mmm(&spec, &lattice, depth, &[call.clone(), Payoff::put(strike)])?;

    let mut s = String::from("check,value,tolerance,passed\n");
    for c in &checks {
        s += &format!("{},{:e},{:e},{}\n", c.name, c.value, c.tolerance, c.passed);
    }
    s += &format!(
        "mmm_exists,{},{:e},{}\n",
        mmm.exists, mmm.threshold, mmm.exists
    );
    let mmm_ok = !mmm.exists || mmm.passed;
    if mmm.exists {
        let worst = mmm.value_errors.iter().fold(mmm.mass_error, |a, &b| a.max(b));
        s += &format!("mmm_value_error,{worst:e},1e-12,{}\n", mmm.passed);
    }
    s += &format!("seed,{},,\nconfig_hash,{},,\n", cfg.seed, cfg.hash());
    print!("{s}");
    if let Some(dir) = out_dir(&cfg)? {
        write_file(&dir.join("oracle.csv"), s.as_bytes())?;
    }
    Ok(if checks.iter().all(|c| c.passed) && mmm_ok { 0 } else { 1 })
}

pub fn simulate(path: &Path, g: &GlobalArgs) -> Outcome {
    let cfg = load(path, g)?;
    let spec = spec_of(&cfg)?;
    let sec = cfg
        .simulate
        .clone()
        .ok_or_else(|| CliError::Config("config has no [simulate] section".into()))?;
    let measure_ = match sec.measure {
        MeasureChoice::Physical => Measure::Physical,
        MeasureChoice::RiskNeutral => Measure::RiskNeutral,
    };
    let opts = SimOptions {
        representation: match sec.representation {
            RepresentationChoice::Price => Representation::Price,
            RepresentationChoice::LogPrice => Representation::LogPrice,
        },
        ..SimOptions::default()
    };
    let start = GarchState::initial(&spec)?;
    let mut paths = simulate_from(&spec, &start, measure_, sec.n_paths, sec.horizon, StreamKey::new(cfg.seed, 0), &opts)?;
    if sec.ems {
        paths = ems_adjust(&paths)?;
    }
    let mut buf = format!("# seed={} config_hash={}\n", cfg.seed, cfg.hash()).into_bytes();
    paths.write_csv(&mut buf)?;
    match out_dir(&cfg)? {
        Some(dir) => write_file(&dir.join("paths.csv"), &buf)?,
        None => std::io::stdout()
            .write_all(&buf)
            .map_err(|e| CliError::Config(e.to_string()))?,
    }
    Ok(0)
}
