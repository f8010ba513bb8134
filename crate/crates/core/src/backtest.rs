//! Hedging-error backtest: physical price paths hedged with Black-Scholes, Duan and
//! risk-neutral LRM ratios, mean square hedging errors and their spread across
//! independent replications.
//!
//! Random streams: outer path `o` of repeat `r` at maturity `T` reads stream
//! `pack(0, T, r, o, 0)`; the inner batch it runs at step `k` reads `pack(1, T, r, o, k)`
//! (`k = 0` for every step when inner batches are reused). See [`stream_offset`].

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::hedging::{bs_baseline, Payoff};
use crate::models::{GarchSpec, GarchState, Measure, Representation};
use crate::rng::StreamKey;
use crate::simulate::{continuation_batch, BatchOutcome, BatchScratch};

/// Default ceiling on simulated path-steps per experiment.
pub const DEFAULT_BUDGET: u128 = 50_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "BS")]
    BlackScholes,
    #[serde(rename = "Duan")]
    Duan,
    #[serde(rename = "LRM")]
    Lrm,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::BlackScholes, Scheme::Duan, Scheme::Lrm];

    pub fn label(self) -> &'static str {
        match self {
            Scheme::BlackScholes => "BS",
            Scheme::Duan => "Duan",
            Scheme::Lrm => "LRM",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bs" | "blackscholes" | "black-scholes" => Ok(Scheme::BlackScholes),
            "duan" => Ok(Scheme::Duan),
            "lrm" => Ok(Scheme::Lrm),
            _ => domain(format!("unknown scheme {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub spec: GarchSpec,
    /// Maturities in steps.
    pub maturities: Vec<usize>,
    /// `S_0 / K` ratios.
    pub moneyness: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_repeats: usize,
    pub seed: u64,
    pub ems: bool,
    /// Use one inner stream per outer path for all steps (common random numbers).
    pub reuse_inner: bool,
    /// Ceiling on simulated path-steps.
    pub budget: u128,
    /// Run even when the estimated cost exceeds the budget.
    pub force: bool,
}

impl ExperimentConfig {
    /// Full-size protocol: 1000 outer paths, 10000 inner paths, 100 replications.
    pub fn full(spec: GarchSpec, maturities: Vec<usize>, moneyness: Vec<f64>) -> Self {
        ExperimentConfig {
            spec,
            maturities,
            moneyness,
            schemes: Scheme::ALL.to_vec(),
            n_outer: 1000,
            n_inner: 10_000,
            n_repeats: 100,
            seed: 0,
            ems: true,
            reuse_inner: false,
            budget: DEFAULT_BUDGET,
            force: false,
        }
    }

    /// Scaled-down profile: 200 outer, 2000 inner, 20 replications.
    pub fn ci(spec: GarchSpec, maturities: Vec<usize>, moneyness: Vec<f64>) -> Self {
        ExperimentConfig {
            n_outer: 200,
            n_inner: 2000,
            n_repeats: 20,
            ..Self::full(spec, maturities, moneyness)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.spec.innov_var != 1.0 {
            return domain("the backtest uses standard Gaussian innovations (innov_var = 1)");
        }
        if self.spec.long_run_variance().is_none() {
            return domain("the backtest needs a stationary spec");
        }
        if self.maturities.is_empty() || self.moneyness.is_empty() || self.schemes.is_empty() {
            return domain("maturities, moneyness and schemes must be non-empty");
        }
        if self.maturities.iter().any(|&t| t == 0 || t > 255) {
            return domain("maturities must lie in 1..=255");
        }
        if self.moneyness.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return domain("moneyness must be positive");
        }
        if self.n_outer == 0 || self.n_outer >= 1 << 24 {
            return domain("n_outer must lie in 1..2^24");
        }
        if self.n_repeats == 0 || self.n_repeats >= 1 << 16 {
            return domain("n_repeats must lie in 1..2^16");
        }
        if self.n_inner < 2 {
            return domain("n_inner must be >= 2");
        }
        Ok(())
    }

    /// Number of simulated path-steps the experiment costs.
    pub fn path_steps(&self) -> u128 {
        let nested = self.schemes.iter().any(|s| *s != Scheme::BlackScholes);
        let per_path: u128 = self
            .maturities
            .iter()
            .map(|&t| {
                let t = t as u128;
                let inner = if nested { t * (t + 1) / 2 } else { t };
                inner * self.n_inner as u128 + t
            })
            .sum();
        per_path * self.n_outer as u128 * self.n_repeats as u128
    }

    pub fn check_budget(&self) -> Result<()> {
        let requested = self.path_steps();
        if requested > self.budget && !self.force {
            return Err(Error::Resource {
                what: "backtest path-steps".into(),
                requested,
                limit: self.budget,
            });
        }
        Ok(())
    }
}

/// Stream offset of a backtest draw: tag (0 outer, 1 inner), maturity, repeat, outer path, step.
pub fn stream_offset(tag: u64, maturity: usize, repeat: usize, outer: usize, step: usize) -> u64 {
    debug_assert!(tag < 256 && maturity < 256 && repeat < 1 << 16 && outer < 1 << 24 && step < 256);
    ((((tag << 8 | maturity as u64) << 16 | repeat as u64) << 24 | outer as u64) << 8) | step as u64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub scheme: Scheme,
    pub maturity: usize,
    pub moneyness: f64,
    /// Mean over replications of the per-replication mean square hedging error.
    pub mse: f64,
    /// Standard deviation of the per-replication mse across replications.
    pub std: f64,
    pub repeat_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HedgeReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub wall_clock_secs: f64,
}

impl HedgeReport {
    pub fn cell(&self, scheme: Scheme, maturity: usize, moneyness: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.scheme == scheme && c.maturity == maturity && c.moneyness == moneyness)
    }

    /// One row per cell. Identical config and seed give identical bytes.
    pub fn write_csv<W: Write>(&self, out: W, config_hash: Option<&str>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "scheme", "maturity", "moneyness", "mse", "std", "n_outer", "n_inner", "n_repeats", "seed",
        ];
        if config_hash.is_some() {
            header.push("config_hash");
        }
        w.write_record(&header)?;
        let c = &self.config;
        for cell in &self.cells {
            let mut row = vec![
                cell.scheme.label().to_string(),
                cell.maturity.to_string(),
                cell.moneyness.to_string(),
                format!("{:.10e}", cell.mse),
                format!("{:.10e}", cell.std),
                c.n_outer.to_string(),
                c.n_inner.to_string(),
                c.n_repeats.to_string(),
                c.seed.to_string(),
            ];
            if let Some(h) = config_hash {
                row.push(h.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table: one mse row and one std row per scheme, one column per
    /// (maturity, moneyness), followed by the std comparison rows.
    pub fn pivot(&self) -> String {
        let mut cols: Vec<(usize, f64)> = Vec::new();
        for c in &self.cells {
            if !cols.contains(&(c.maturity, c.moneyness)) {
                cols.push((c.maturity, c.moneyness));
            }
        }
        let mut s = String::new();
        let _ = write!(s, "{:<20}", "T");
        for (t, _) in &cols {
            let _ = write!(s, "{t:>10}");
        }
        let _ = write!(s, "\n{:<20}", "S0/K");
        for (_, m) in &cols {
            let _ = write!(s, "{m:>10}");
        }
        s.push('\n');
        for scheme in Scheme::ALL {
            if !self.cells.iter().any(|c| c.scheme == scheme) {
                continue;
            }
            for (label, pick) in [("mse", true), ("std", false)] {
                let _ = write!(s, "{:<20}", format!("{} {label}", scheme.label()));
                for &(t, m) in &cols {
                    match self.cell(scheme, t, m) {
                        Some(c) => {
                            let _ = write!(s, "{:>10.4}", if pick { c.mse } else { c.std });
                        }
                        None => {
                            let _ = write!(s, "{:>10}", "-");
                        }
                    }
                }
                s.push('\n');
            }
        }
        let cmp = std_comparison(self);
        for (a, b) in COMPARISONS {
            if !cmp.iter().any(|c| c.a == a && c.b == b) {
                continue;
            }
            let _ = write!(s, "{:<20}", format!("std {} vs. {}", a.label(), b.label()));
            for &(t, m) in &cols {
                match cmp.iter().find(|c| c.a == a && c.b == b && c.maturity == t && c.moneyness == m) {
                    Some(c) => {
                        let _ = write!(s, "{:>9.2}%", c.percent);
                    }
                    None => {
                        let _ = write!(s, "{:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

const COMPARISONS: [(Scheme, Scheme); 3] = [
    (Scheme::BlackScholes, Scheme::Duan),
    (Scheme::BlackScholes, Scheme::Lrm),
    (Scheme::Duan, Scheme::Lrm),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StdComparison {
    pub a: Scheme,
    pub b: Scheme,
    pub maturity: usize,
    pub moneyness: f64,
    /// `(std_a / std_b - 1) * 100`.
    pub percent: f64,
}

pub fn std_percent_increase(std_a: f64, std_b: f64) -> f64 {
    (std_a / std_b - 1.0) * 100.0
}

/// Percentage increase in standard deviation for (BS, Duan), (BS, LRM) and (Duan, LRM).
pub fn std_comparison(report: &HedgeReport) -> Vec<StdComparison> {
    let mut out = Vec::new();
    for (a, b) in COMPARISONS {
        for ca in report.cells.iter().filter(|c| c.scheme == a) {
            if let Some(cb) = report.cell(b, ca.maturity, ca.moneyness) {
                out.push(StdComparison {
                    a,
                    b,
                    maturity: ca.maturity,
                    moneyness: ca.moneyness,
                    percent: std_percent_increase(ca.std, cb.std),
                });
            }
        }
    }
    out
}

struct Scratch {
    batch: BatchScratch,
    out: BatchOutcome,
    states: Vec<GarchState>,
}

/// Squared hedging errors of one outer path, indexed `[strike][scheme]`.
fn hedge_outer_path(
    cfg: &ExperimentConfig,
    t: usize,
    repeat: usize,
    outer: usize,
    payoffs: &[Payoff],
    sc: &mut Scratch,
) -> Vec<f64> {
    let spec = &cfg.spec;
    let n_s = cfg.schemes.len();
    let nested = cfg.schemes.iter().any(|s| *s != Scheme::BlackScholes);

    // physical path
    let mut rng = StreamKey::new(cfg.seed, stream_offset(0, t, repeat, outer, 0)).path_rng(0);
    let mut st = GarchState::initial(spec).expect("validated spec");
    sc.states.clear();
    sc.states.push(st);
    for _ in 0..t {
        st.step(spec, Measure::Physical, Representation::LogPrice, rng.normal());
        sc.states.push(st);
    }

    let n_k = payoffs.len();
    let mut v0 = vec![0.0; n_k];
    let mut gains = vec![0.0; n_k * n_s];
    let n = cfg.n_inner;
    let last_step = if nested { t } else { 1 };
    for k in 1..=t {
        let start = sc.states[k - 1];
        let s_prev = start.price();
        let ds = sc.states[k].price() - s_prev;
        if k <= last_step {
            let step_tag = if cfg.reuse_inner { 0 } else { k };
            let key = StreamKey::new(cfg.seed, stream_offset(1, t, repeat, outer, step_tag));
            continuation_batch(
                spec,
                &start,
                Representation::Price,
                t - k + 1,
                n,
                key,
                cfg.ems,
                &mut sc.batch,
                &mut sc.out,
            );
        }
        let sigma_sq = start.next_var;
        for (ki, payoff) in payoffs.iter().enumerate() {
            let strike = payoff.strike;
            let (mut sum_h, mut sum_lrm, mut sum_duan) = (0.0, 0.0, 0.0);
            if k <= last_step {
                for i in 0..n {
                    let st_t = sc.out.terminal[i];
                    let h = (st_t - strike).max(0.0);
                    sum_h += h;
                    sum_lrm += h * (sc.out.first_ratio[i] - 1.0);
                    if st_t >= strike {
                        sum_duan += st_t;
                    }
                }
            }
            if k == 1 {
                v0[ki] = sum_h / n as f64;
            }
            for (si, scheme) in cfg.schemes.iter().enumerate() {
                let xi = match scheme {
                    Scheme::BlackScholes => {
                        bs_baseline(spec, payoff, t - k + 1, s_prev).expect("validated call").delta
                    }
                    Scheme::Lrm => sum_lrm / n as f64 / (s_prev * sigma_sq.exp_m1()),
                    Scheme::Duan => sum_duan / n as f64 / s_prev,
                };
                gains[ki * n_s + si] += xi * ds;
            }
        }
    }
    let s_t = sc.states[t].price();
    let mut err = vec![0.0; n_k * n_s];
    for (ki, payoff) in payoffs.iter().enumerate() {
        let h = payoff.eval(s_t);
        for si in 0..n_s {
            let e = h - v0[ki] - gains[ki * n_s + si];
            err[ki * n_s + si] = e * e;
        }
    }
    err
}

/// Runs the hedging experiment.
///
/// For every repeat, maturity and outer path a physical path is simulated and hedged at
/// every step with each scheme's ratio, all strikes sharing the same inner batches. The
/// self-financing error is `H - V_0 - sum_k xi_k (S_k - S_{k-1})` with `V_0` the
/// risk-neutral price from the first inner batch, for every scheme.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<HedgeReport> {
    cfg.validate()?;
    cfg.check_budget()?;
    let clock = Instant::now();
    let s0 = cfg.spec.s0;
    let payoffs: Vec<Payoff> = cfg.moneyness.iter().map(|m| Payoff::call(s0 / m)).collect();
    let n_s = cfg.schemes.len();
    let n_k = payoffs.len();
    let mut cells = Vec::new();
    for &t in &cfg.maturities {
        info!("maturity {t}: {} repeats x {} outer paths", cfg.n_repeats, cfg.n_outer);
        let jobs: Vec<(usize, usize)> = (0..cfg.n_repeats)
            .flat_map(|r| (0..cfg.n_outer).map(move |o| (r, o)))
            .collect();
        let errors: Vec<Vec<f64>> = jobs
            .par_iter()
            .map_init(
                || Scratch {
                    batch: BatchScratch::default(),
                    out: BatchOutcome::default(),
                    states: Vec::with_capacity(t + 1),
                },
                |sc, &(r, o)| hedge_outer_path(cfg, t, r, o, &payoffs, sc),
            )
            .collect();
        for ki in 0..n_k {
            for (si, &scheme) in cfg.schemes.iter().enumerate() {
                let repeat_mse: Vec<f64> = (0..cfg.n_repeats)
                    .map(|r| {
                        let rows = &errors[r * cfg.n_outer..(r + 1) * cfg.n_outer];
                        rows.iter().map(|e| e[ki * n_s + si]).sum::<f64>() / cfg.n_outer as f64
                    })
                    .collect();
                let nr = repeat_mse.len() as f64;
                let mse = repeat_mse.iter().sum::<f64>() / nr;
                let std = if repeat_mse.len() > 1 {
                    (repeat_mse.iter().map(|x| (x - mse).powi(2)).sum::<f64>() / (nr - 1.0)).sqrt()
                } else {
                    0.0
                };
                cells.push(CellResult {
                    scheme,
                    maturity: t,
                    moneyness: cfg.moneyness[ki],
                    mse,
                    std,
                    repeat_mse,
                });
            }
        }
    }
    let wall_clock_secs = clock.elapsed().as_secs_f64();
    info!("backtest finished in {wall_clock_secs:.1}s");
    Ok(HedgeReport {
        config: cfg.clone(),
        cells,
        wall_clock_secs,
    })
}
