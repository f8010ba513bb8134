//! Strategy bookkeeping and the hedge-ratio engines: local risk minimization
//! under the physical measure, under the risk-neutral measure in the log-price
//! and price representations, Duan's delta and the Black-Scholes baseline.

use std::fmt;
use std::sync::Arc;

use log::warn;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{domain, Error, Result};
use crate::measure::mean_and_se;
use crate::models::{check_moment_condition, GarchSpec, GarchState, Measure, Representation, Variant};
use crate::oracle::{Asset, Dynamics, LatticeSpec, Tree, TreeSpec, TreeStrategy, MAX_LATTICE_DEPTH};
use crate::rng::StreamKey;
use crate::simulate::{continuation_batch, BatchOutcome, BatchScratch, Innovations, PathSet};

/// Longest horizon accepted by the Monte Carlo evaluator of the physical recursions.
///
/// Hedging a path costs `n T (T + 1) / 2` simulated steps, one batch of `n`
/// continuations of length `T - k + 1` per step `k`.
pub const MAX_MC_HORIZON: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PayoffKind {
    EuropeanCall,
    EuropeanPut,
    Custom,
}

/// A European payoff `H(S_T)`.
#[derive(Clone)]
pub struct Payoff {
    pub kind: PayoffKind,
    /// Strike of calls and puts; NaN for custom payoffs.
    pub strike: f64,
    custom: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payoff")
            .field("kind", &self.kind)
            .field("strike", &self.strike)
            .finish()
    }
}

impl Payoff {
    pub fn call(strike: f64) -> Self {
        Payoff {
            kind: PayoffKind::EuropeanCall,
            strike,
            custom: None,
        }
    }

    pub fn put(strike: f64) -> Self {
        Payoff {
            kind: PayoffKind::EuropeanPut,
            strike,
            custom: None,
        }
    }

    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Payoff {
            kind: PayoffKind::Custom,
            strike: f64::NAN,
            custom: Some(Arc::new(f)),
        }
    }

    /// `H(S_T)`.
    #[inline]
    pub fn eval(&self, s: f64) -> f64 {
        match self.kind {
            PayoffKind::EuropeanCall => (s - self.strike).max(0.0),
            PayoffKind::EuropeanPut => (self.strike - s).max(0.0),
            PayoffKind::Custom => (self.custom.as_ref().expect("custom payoff"))(s),
        }
    }

    /// `h(s_T) = H(exp(s_T))`.
    #[inline]
    pub fn eval_log(&self, s: f64) -> f64 {
        self.eval(s.exp())
    }

    fn require_call(&self, what: &str) -> Result<()> {
        if self.kind != PayoffKind::EuropeanCall {
            return Err(Error::NotApplicable(format!("{what} is defined for European calls only")));
        }
        if !(self.strike >= 0.0) {
            return domain("strike must be >= 0");
        }
        Ok(())
    }
}

/// A generalized trading strategy along one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Strategy {
    pub asset: Asset,
    /// Traded asset `X_0 .. X_T` (log-price or price).
    pub asset_path: Vec<f64>,
    /// Risky holdings `xi_1 .. xi_T`.
    pub xi: Vec<f64>,
    /// Riskless holdings `xi0_0 .. xi0_T`, `xi0_0 = V_0` and `xi0_k = V_k - xi_k X_k`.
    pub xi0: Vec<f64>,
    /// `V_0 .. V_T`.
    pub values: Vec<f64>,
    pub xi_se: Option<Vec<f64>>,
    pub values_se: Option<Vec<f64>>,
}

impl Strategy {
    pub fn new(asset: Asset, asset_path: Vec<f64>, xi: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let t = xi.len();
        if asset_path.len() != t + 1 || values.len() != t + 1 {
            return Err(Error::Mismatch(format!(
                "strategy with {t} holdings needs {} asset values and values, got {} and {}",
                t + 1,
                asset_path.len(),
                values.len()
            )));
        }
        let mut xi0 = Vec::with_capacity(t + 1);
        xi0.push(values[0]);
        for k in 1..=t {
            xi0.push(values[k] - xi[k - 1] * asset_path[k]);
        }
        Ok(Strategy {
            asset,
            asset_path,
            xi,
            xi0,
            values,
            xi_se: None,
            values_se: None,
        })
    }

    /// The self-financing strategy with initial capital `v0` and holdings `xi`.
    pub fn self_financing(asset: Asset, asset_path: Vec<f64>, v0: f64, xi: Vec<f64>) -> Result<Self> {
        if asset_path.len() != xi.len() + 1 {
            return Err(Error::Mismatch("asset path must be one longer than the holdings".into()));
        }
        let mut values = vec![v0];
        for k in 1..asset_path.len() {
            let prev = values[k - 1];
            values.push(prev + xi[k - 1] * (asset_path[k] - asset_path[k - 1]));
        }
        Strategy::new(asset, asset_path, xi, values)
    }

    pub fn horizon(&self) -> usize {
        self.xi.len()
    }
}

/// Gains, cost and global risk of a strategy along its path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyProcesses {
    /// `G_0 .. G_T`.
    pub gains: Vec<f64>,
    /// `C_n = V_n - G_n`.
    pub cost: Vec<f64>,
    /// `C_{n+1} - C_n`, `n = 0 .. T-1`.
    pub cost_increments: Vec<f64>,
    /// `L_T = C_T - C_0`.
    pub global_risk: f64,
}

pub fn strategy_processes(strategy: &Strategy, asset_path: &[f64]) -> Result<StrategyProcesses> {
    let t = strategy.horizon();
    if asset_path.len() != t + 1 || strategy.values.len() != t + 1 {
        return Err(Error::Mismatch(format!(
            "strategy of horizon {t} and asset path of length {} do not align",
            asset_path.len()
        )));
    }
    let mut gains = vec![0.0; t + 1];
    for k in 1..=t {
        gains[k] = gains[k - 1] + strategy.xi[k - 1] * (asset_path[k] - asset_path[k - 1]);
    }
    let cost: Vec<f64> = strategy.values.iter().zip(&gains).map(|(v, g)| v - g).collect();
    let cost_increments = cost.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(StrategyProcesses {
        global_risk: cost[t] - cost[0],
        gains,
        cost,
        cost_increments,
    })
}

/// Monte Carlo estimates of the time-0 local risk `E[(C_1 - C_0)^2]` and remaining
/// risk `E[(C_T - C_0)^2]` from processes of paths sharing a start.
pub fn estimate_initial_risks(processes: &[StrategyProcesses]) -> (f64, f64) {
    let n = processes.len() as f64;
    let local = processes.iter().map(|p| p.cost_increments[0].powi(2)).sum::<f64>() / n;
    let remaining = processes.iter().map(|p| p.global_risk.powi(2)).sum::<f64>() / n;
    (local, remaining)
}

/// Estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    fn from_samples(x: &[f64]) -> Self {
        let (value, se) = mean_and_se(x);
        Estimate { value, se }
    }

    fn scaled(self, c: f64) -> Self {
        Estimate {
            value: self.value * c,
            se: self.se * c.abs(),
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Zero-rate lognormal call price and delta for total remaining variance `v`.
pub fn bs_call(s: f64, strike: f64, v: f64) -> (f64, f64) {
    if v <= 0.0 || strike <= 0.0 {
        let itm = s >= strike;
        return ((s - strike).max(0.0), if itm { 1.0 } else { 0.0 });
    }
    let sd = v.sqrt();
    let d1 = ((s / strike).ln() + 0.5 * v) / sd;
    let d2 = d1 - sd;
    let n = std_normal();
    let delta = n.cdf(d1);
    (s * delta - strike * n.cdf(d2), delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BsQuote {
    pub price: f64,
    pub delta: f64,
    /// Per-step variance used.
    pub variance: f64,
}

/// Black-Scholes price and delta with the per-step variance set to the stationary variance
/// of the spec, `remaining_steps` steps before expiry.
pub fn bs_baseline(spec: &GarchSpec, payoff: &Payoff, remaining_steps: usize, s: f64) -> Result<BsQuote> {
    payoff.require_call("the Black-Scholes baseline")?;
    let variance = spec
        .long_run_variance()
        .ok_or_else(|| Error::Domain("Black-Scholes baseline needs a stationary spec".into()))?;
    let (price, delta) = bs_call(s, payoff.strike, variance * remaining_steps as f64);
    Ok(BsQuote {
        price,
        delta,
        variance,
    })
}

/// How conditional expectations of the physical recursions are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum PhysicalEvaluator {
    /// Exhaustive lattice tree; path innovations must be lattice atoms.
    Exact(LatticeSpec),
    /// One batch of `n_paths` physical continuations per step.
    MonteCarlo {
        innovations: Innovations,
        n_paths: usize,
        key: StreamKey,
    },
    /// Exact up to the lattice depth limit, Monte Carlo with lattice innovations beyond it.
    Auto {
        lattice: LatticeSpec,
        n_paths: usize,
        key: StreamKey,
    },
}

fn mmm_weight(spec: &GarchSpec, var: f64, eps: f64) -> f64 {
    crate::measure::mmm_factor(spec, var, eps)
}

/// Physical-measure local risk minimization on a whole tree, by the product formulas
/// `V_k = E_k[h prod_{j>k} (1 - a_j)]`, `xi_k = E_{k-1}[h prod_{j>k} (1 - a_j) eps_k] / (sigma^2 sigma_k)`
/// with `a_j = mu_j eps_j / (sigma^2 sigma_j)`, each evaluated as a plain tree expectation.
pub fn lrm_physical_tree(tree: &Tree, spec: &GarchSpec, payoff: &Payoff) -> Result<TreeStrategy> {
    if tree.dynamics != Dynamics::Physical {
        return Err(Error::NotApplicable("physical recursions need a physical tree".into()));
    }
    let d = tree.depth;
    let n_leaves = tree.leaves().len();
    // per leaf: h and the factors 1 - a_j, j = 1..=d
    let mut h = Vec::with_capacity(n_leaves);
    let mut factors = Vec::with_capacity(n_leaves * d);
    let mut eps = Vec::with_capacity(n_leaves * d);
    let mut path = crate::oracle::TreePath::default();
    for i in 0..n_leaves {
        tree.path(i, &mut path);
        h.push(payoff.eval_log(path.terminal_log_price()));
        for j in 0..d {
            factors.push(mmm_weight(spec, path.variances[j], path.eps[j]));
            eps.push(path.eps[j]);
        }
    }
    // suffix[i][k] = prod_{j > k} factor_j (1-based j), k = 0..=d
    let suffix = |i: usize, k: usize| -> f64 { factors[i * d + k..(i + 1) * d].iter().product() };
    let mut values = Vec::with_capacity(d + 1);
    for k in 0..=d {
        let g: Vec<f64> = (0..n_leaves).map(|i| h[i] * suffix(i, k)).collect();
        values.push(tree.rollback(&g, k));
    }
    let mut xi = Vec::with_capacity(d);
    for k in 1..=d {
        let g: Vec<f64> = (0..n_leaves)
            .map(|i| h[i] * suffix(i, k) * eps[i * d + k - 1])
            .collect();
        let e = tree.rollback(&g, k - 1);
        let lvl = &tree.levels[k - 1];
        xi.push(
            e.iter()
                .zip(&lvl.next_var)
                .map(|(v, var)| v / (spec.innov_var * var.sqrt()))
                .collect(),
        );
    }
    Ok(TreeStrategy {
        asset: Asset::LogPrice,
        values,
        xi,
    })
}

/// Replays the physical innovations `eps_1 .. eps_T` from the spec's initial state.
fn replay_physical(spec: &GarchSpec, eps: &[f64]) -> Result<Vec<GarchState>> {
    let mut st = GarchState::initial(spec)?;
    let mut states = vec![st];
    for &e in eps {
        st.step(spec, Measure::Physical, Representation::LogPrice, e);
        states.push(st);
    }
    Ok(states)
}

/// Physical-measure local risk-minimizing strategy along the path driven by the
/// physical innovations `eps_path`, with log-prices as the traded asset.
pub fn lrm_physical(
    spec: &GarchSpec,
    payoff: &Payoff,
    eps_path: &[f64],
    evaluator: &PhysicalEvaluator,
) -> Result<Strategy> {
    spec.validate()?;
    let t = eps_path.len();
    if t == 0 {
        return domain("horizon must be >= 1");
    }
    if let Variant::HestonNandi = spec.variant {
        // drift grows with the variance: Prop. bounded-drift hypothesis is not available
        warn!("Heston-Nandi drift is unbounded; physical LRM existence is not guaranteed");
    }
    match evaluator {
        PhysicalEvaluator::Exact(lattice) => lrm_physical_exact(spec, payoff, eps_path, lattice),
        PhysicalEvaluator::MonteCarlo {
            innovations,
            n_paths,
            key,
        } => lrm_physical_mc(spec, payoff, eps_path, innovations, *n_paths, *key),
        PhysicalEvaluator::Auto {
            lattice,
            n_paths,
            key,
        } => {
            if t <= MAX_LATTICE_DEPTH {
                lrm_physical_exact(spec, payoff, eps_path, lattice)
            } else {
                warn!(
                    "horizon {t} exceeds the exact tree depth {MAX_LATTICE_DEPTH}; using Monte Carlo"
                );
                lrm_physical_mc(
                    spec,
                    payoff,
                    eps_path,
                    &Innovations::Lattice(lattice.clone()),
                    *n_paths,
                    *key,
                )
            }
        }
    }
}

fn lrm_physical_exact(
    spec: &GarchSpec,
    payoff: &Payoff,
    eps_path: &[f64],
    lattice: &LatticeSpec,
) -> Result<Strategy> {
    let t = eps_path.len();
    let tree = Tree::build(spec, &TreeSpec::lattice(lattice, t, Dynamics::Physical)?)?;
    let strat = lrm_physical_tree(&tree, spec, payoff)?;
    let b = tree.branching;
    let mut idx = vec![0usize; t + 1];
    for (k, e) in eps_path.iter().enumerate() {
        let c = lattice
            .support
            .iter()
            .position(|x| (x - e).abs() <= 1e-12 * x.abs().max(1.0))
            .ok_or_else(|| Error::Mismatch(format!("innovation {e} is not a lattice atom")))?;
        idx[k + 1] = idx[k] * b + c;
    }
    let asset_path: Vec<f64> = (0..=t).map(|k| tree.levels[k].log_price[idx[k]]).collect();
    let values: Vec<f64> = (0..=t).map(|k| strat.values[k][idx[k]]).collect();
    let xi: Vec<f64> = (1..=t).map(|k| strat.xi[k - 1][idx[k - 1]]).collect();
    Strategy::new(Asset::LogPrice, asset_path, xi, values)
}

fn lrm_physical_mc(
    spec: &GarchSpec,
    payoff: &Payoff,
    eps_path: &[f64],
    innovations: &Innovations,
    n_paths: usize,
    key: StreamKey,
) -> Result<Strategy> {
    let t = eps_path.len();
    if t > MAX_MC_HORIZON {
        return Err(Error::Resource {
            what: "Monte Carlo physical LRM horizon".into(),
            requested: t as u128,
            limit: MAX_MC_HORIZON as u128,
        });
    }
    if n_paths < 2 {
        return domain("Monte Carlo evaluator needs at least 2 paths");
    }
    let states = replay_physical(spec, eps_path)?;
    let sd = spec.innov_var.sqrt();
    let mut xi = Vec::with_capacity(t);
    let mut xi_se = Vec::with_capacity(t);
    let mut values = vec![0.0; t + 1];
    let mut values_se = vec![0.0; t + 1];
    let mut x = vec![0.0; n_paths];
    let mut y = vec![0.0; n_paths];
    for k in 1..=t {
        let m = t - k + 1;
        let start = states[k - 1];
        let step_key = StreamKey::new(key.seed, key.stream_offset.wrapping_add(k as u64));
        for i in 0..n_paths {
            let mut rng = step_key.path_rng(i as u64);
            let mut st = start;
            let mut first_eps = 0.0;
            let mut first_factor = 1.0;
            let mut rest = 1.0;
            for j in 0..m {
                let noise = match innovations {
                    Innovations::Gaussian => sd * rng.normal(),
                    Innovations::Lattice(l) => l.sample(rng.uniform()),
                };
                let var = st.next_var;
                let step = st.step(spec, Measure::Physical, Representation::LogPrice, noise);
                let f = mmm_weight(spec, var, step.eps);
                if j == 0 {
                    first_eps = step.eps;
                    first_factor = f;
                } else {
                    rest *= f;
                }
            }
            let h = payoff.eval_log(st.log_price);
            x[i] = h * rest * first_eps;
            y[i] = h * rest * first_factor;
        }
        let scale = 1.0 / (spec.innov_var * start.next_var.sqrt());
        let e = Estimate::from_samples(&x).scaled(scale);
        xi.push(e.value);
        xi_se.push(e.se);
        let v = Estimate::from_samples(&y);
        values[k - 1] = v.value;
        values_se[k - 1] = v.se;
    }
    values[t] = payoff.eval_log(states[t].log_price);
    let asset_path = states.iter().map(|s| s.log_price).collect();
    let mut s = Strategy::new(Asset::LogPrice, asset_path, xi, values)?;
    s.xi_se = Some(xi_se);
    s.values_se = Some(values_se);
    Ok(s)
}

/// Inner simulation settings of the risk-neutral engines. Step `k` of path `i`
/// reads stream `stream_offset + i (T + 1) + k` of `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnerConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub stream_offset: u64,
    /// Apply EMS to price-representation batches.
    pub ems: bool,
}

impl InnerConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        InnerConfig {
            n_paths,
            seed,
            stream_offset: 0,
            ems: true,
        }
    }

    fn key(&self, path: usize, horizon: usize, k: usize) -> StreamKey {
        let off = path as u64 * (horizon as u64 + 1) + k as u64;
        StreamKey::new(self.seed, self.stream_offset.wrapping_add(off))
    }
}

fn warn_if_moments_unverified(spec: &GarchSpec) {
    match check_moment_condition(spec, 2) {
        Ok(c) if !c.satisfied => warn!(
            "fourth-moment condition fails (spectral radius {:.4}); square integrability under the risk-neutral measure is not guaranteed",
            c.spectral_radius
        ),
        _ => {}
    }
}

/// States `0..=T` of path `i`, replayed through the recursion of the set's measure.
fn replay_path(spec: &GarchSpec, paths: &PathSet, i: usize) -> Result<Vec<GarchState>> {
    if paths.ems_applied {
        return Err(Error::NotApplicable(
            "EMS-adjusted paths cannot be replayed through the model recursion".into(),
        ));
    }
    let mut st = GarchState::initial(spec)?;
    if (st.log_price - paths.log_price(i, 0)).abs() > 1e-12 {
        return Err(Error::Mismatch("path start differs from the spec's S_0".into()));
    }
    let mut states = vec![st];
    for k in 1..=paths.horizon {
        st.step(spec, paths.measure, paths.representation, paths.innovation(i, k));
        let stored = paths.log_price(i, k);
        if (st.log_price - stored).abs() > 1e-9 * stored.abs().max(1.0) {
            return Err(Error::Mismatch(format!(
                "path {i} does not follow the spec's recursion at step {k}"
            )));
        }
        states.push(st);
    }
    Ok(states)
}

fn check_risk_neutral(paths: &PathSet, rep: Representation) -> Result<()> {
    if paths.measure != Measure::RiskNeutral || paths.representation != rep {
        return Err(Error::NotApplicable(format!(
            "expected risk-neutral paths in the {rep:?} representation"
        )));
    }
    Ok(())
}

/// Time-0 value `E~[h(s_T)]` and ratio `xi_1 = E~[eps~_1 h(s_T)] / sigma_1` from a
/// batch of risk-neutral log-price-representation paths.
///
/// Ratios use the payoff centred on its sample mean, which leaves the expectation
/// unchanged and makes constant payoffs give exactly zero.
pub fn logrep_estimate(q_paths: &PathSet, payoff: &Payoff) -> Result<(Estimate, Estimate)> {
    check_risk_neutral(q_paths, Representation::LogPrice)?;
    let t = q_paths.horizon;
    let h: Vec<f64> = (0..q_paths.n_paths).map(|i| payoff.eval_log(q_paths.log_price(i, t))).collect();
    let hbar = mean(&h);
    let x: Vec<f64> = (0..q_paths.n_paths)
        .map(|i| q_paths.innovation(i, 1) * (h[i] - hbar))
        .collect();
    let sigma = q_paths.variance(0, 1).sqrt();
    Ok((Estimate::from_samples(&h), Estimate::from_samples(&x).scaled(1.0 / sigma)))
}

/// Time-0 value `E~[H]` and ratio `xi_1 = S_0 / Sigma_1^2 E~[H (S_1 / S_0 - 1)]` from a
/// batch of risk-neutral price-representation paths (EMS-adjusted or not).
pub fn pricerep_estimate(q_paths: &PathSet, payoff: &Payoff) -> Result<(Estimate, Estimate)> {
    check_risk_neutral(q_paths, Representation::Price)?;
    let t = q_paths.horizon;
    let s0 = q_paths.price(0, 0);
    let h: Vec<f64> = (0..q_paths.n_paths).map(|i| payoff.eval(q_paths.price(i, t))).collect();
    let hbar = mean(&h);
    let x: Vec<f64> = (0..q_paths.n_paths)
        .map(|i| (h[i] - hbar) * (q_paths.price(i, 1) / s0 - 1.0))
        .collect();
    let var1 = q_paths.variance(0, 1);
    let scale = s0 / (s0 * s0 * var1.exp_m1());
    Ok((Estimate::from_samples(&h), Estimate::from_samples(&x).scaled(scale)))
}

/// Duan's time-0 ratio `E~[(S_T / S_0) 1{S_T >= K}]`.
pub fn duan_estimate(q_paths: &PathSet, payoff: &Payoff) -> Result<Estimate> {
    payoff.require_call("Duan's hedge ratio")?;
    check_risk_neutral(q_paths, Representation::Price)?;
    let t = q_paths.horizon;
    let s0 = q_paths.price(0, 0);
    let x: Vec<f64> = (0..q_paths.n_paths)
        .map(|i| {
            let st = q_paths.price(i, t);
            if st >= payoff.strike {
                st / s0
            } else {
                0.0
            }
        })
        .collect();
    Ok(Estimate::from_samples(&x))
}

#[derive(Clone, Copy)]
enum Engine {
    LogRep,
    PriceRep,
    Duan,
}

fn along_path(
    spec: &GarchSpec,
    paths: &PathSet,
    path: usize,
    payoff: &Payoff,
    inner: &InnerConfig,
    engine: Engine,
) -> Result<(Vec<Estimate>, Vec<Estimate>, Vec<GarchState>)> {
    if spec.innov_var != 1.0 {
        return Err(Error::NotApplicable("risk-neutral engines require unit innovation variance".into()));
    }
    if inner.n_paths < 2 {
        return domain("inner batches need at least 2 paths");
    }
    if path >= paths.n_paths {
        return domain(format!("path index {path} out of range"));
    }
    warn_if_moments_unverified(spec);
    let states = replay_path(spec, paths, path)?;
    let t = paths.horizon;
    let (rep, ems) = match engine {
        Engine::LogRep => (Representation::LogPrice, false),
        _ => (Representation::Price, inner.ems),
    };
    let mut scratch = BatchScratch::default();
    let mut out = BatchOutcome::default();
    let mut ratios = Vec::with_capacity(t);
    let mut values = Vec::with_capacity(t);
    let n = inner.n_paths;
    let mut x = vec![0.0; n];
    let mut h = vec![0.0; n];
    for k in 1..=t {
        let start = states[k - 1];
        let key = inner.key(path, t, k);
        continuation_batch(spec, &start, rep, t - k + 1, n, key, ems, &mut scratch, &mut out);
        let s_prev = start.price();
        let var = start.next_var;
        for i in 0..n {
            h[i] = payoff.eval(out.terminal[i]);
        }
        let hbar = mean(&h);
        for i in 0..n {
            x[i] = match engine {
                Engine::LogRep => out.first_noise[i] * (h[i] - hbar),
                Engine::PriceRep => (h[i] - hbar) * (out.first_ratio[i] - 1.0),
                Engine::Duan => {
                    if out.terminal[i] >= payoff.strike {
                        out.terminal[i] / s_prev
                    } else {
                        0.0
                    }
                }
            };
        }
        let scale = match engine {
            Engine::LogRep => 1.0 / var.sqrt(),
            Engine::PriceRep => 1.0 / (s_prev * var.exp_m1()),
            Engine::Duan => 1.0,
        };
        ratios.push(Estimate::from_samples(&x).scaled(scale));
        values.push(Estimate::from_samples(&h));
    }
    Ok((ratios, values, states))
}

fn assemble(
    asset: Asset,
    states: &[GarchState],
    payoff: &Payoff,
    ratios: Vec<Estimate>,
    values: Vec<Estimate>,
) -> Result<Strategy> {
    let t = ratios.len();
    let asset_path: Vec<f64> = states
        .iter()
        .map(|s| match asset {
            Asset::LogPrice => s.log_price,
            Asset::Price => s.price(),
        })
        .collect();
    let mut v: Vec<f64> = values.iter().map(|e| e.value).collect();
    v.push(payoff.eval(states[t].price()));
    let mut v_se: Vec<f64> = values.iter().map(|e| e.se).collect();
    v_se.push(0.0);
    let mut s = Strategy::new(asset, asset_path, ratios.iter().map(|e| e.value).collect(), v)?;
    s.xi_se = Some(ratios.iter().map(|e| e.se).collect());
    s.values_se = Some(v_se);
    Ok(s)
}

/// Risk-neutral local risk minimization with log-prices as the asset, along path `path`
/// of `paths`: `V_k = E~_k[h]`, `xi_k = E~_{k-1}[eps~_k h] / sigma_k`, one fresh
/// batch of log-price-representation continuations per step.
pub fn lrm_martingale_logrep(
    spec: &GarchSpec,
    paths: &PathSet,
    path: usize,
    payoff: &Payoff,
    inner: &InnerConfig,
) -> Result<Strategy> {
    let (r, v, states) = along_path(spec, paths, path, payoff, inner, Engine::LogRep)?;
    assemble(Asset::LogPrice, &states, payoff, r, v)
}

/// Risk-neutral local risk minimization with prices as the asset:
/// `xi_k = S_{k-1} / Sigma_k^2 E~_{k-1}[H (exp(-sigma_k^2/2 + sigma_k eps~_k) - 1)]`,
/// `Sigma_k^2 = S_{k-1}^2 (exp(sigma_k^2) - 1)`, batches EMS-adjusted when requested.
pub fn lrm_martingale_pricerep(
    spec: &GarchSpec,
    paths: &PathSet,
    path: usize,
    payoff: &Payoff,
    inner: &InnerConfig,
) -> Result<Strategy> {
    let (r, v, states) = along_path(spec, paths, path, payoff, inner, Engine::PriceRep)?;
    assemble(Asset::Price, &states, payoff, r, v)
}

/// Duan's ratios `xi^D_k = E~_{k-1}[(S_T / S_{k-1}) 1{S_T >= K}]` along path `path`.
pub fn duan_delta(
    spec: &GarchSpec,
    paths: &PathSet,
    path: usize,
    payoff: &Payoff,
    inner: &InnerConfig,
) -> Result<Vec<Estimate>> {
    payoff.require_call("Duan's hedge ratio")?;
    let (r, _, _) = along_path(spec, paths, path, payoff, inner, Engine::Duan)?;
    Ok(r)
}
