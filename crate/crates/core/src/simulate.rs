//! Path generation under the physical and risk-neutral measures and the
//! empirical martingale simulation (EMS) correction.

use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

use crate::error::{Error, Result};
use crate::models::{GarchSpec, GarchState, Measure, Representation};
use crate::oracle::LatticeSpec;
use crate::rng::StreamKey;

/// Default ceiling on `n_paths * horizon`.
pub const DEFAULT_MAX_CELLS: usize = 50_000_000;

/// Law of the innovations driving a simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Innovations {
    /// IIDN(0, innov_var) under the physical measure, IIDN(0, 1) under the risk-neutral one.
    Gaussian,
    /// Discrete atoms sampled by inverse CDF (physical measure only).
    Lattice(LatticeSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub representation: Representation,
    pub innovations: Innovations,
    pub max_cells: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            representation: Representation::Price,
            innovations: Innovations::Gaussian,
            max_cells: DEFAULT_MAX_CELLS,
        }
    }
}

/// A batch of trajectories stored row-major, one row per path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSet {
    pub measure: Measure,
    pub representation: Representation,
    pub n_paths: usize,
    pub horizon: usize,
    /// `n_paths x (horizon + 1)`: `s_0 .. s_T`.
    pub log_prices: Vec<f64>,
    /// `n_paths x horizon`: `sigma_1^2 .. sigma_T^2`.
    pub variances: Vec<f64>,
    /// `n_paths x horizon`: `eps` under the physical measure, `eps_tilde` under the risk-neutral one.
    pub innovations: Vec<f64>,
    pub seed: u64,
    pub stream_offset: u64,
    pub ems_applied: bool,
}

impl PathSet {
    pub fn log_price(&self, path: usize, t: usize) -> f64 {
        self.log_prices[path * (self.horizon + 1) + t]
    }

    pub fn price(&self, path: usize, t: usize) -> f64 {
        self.log_price(path, t).exp()
    }

    /// `sigma_t^2` for `t` in `1..=horizon`.
    pub fn variance(&self, path: usize, t: usize) -> f64 {
        self.variances[path * self.horizon + t - 1]
    }

    /// Innovation at step `t` in `1..=horizon`.
    pub fn innovation(&self, path: usize, t: usize) -> f64 {
        self.innovations[path * self.horizon + t - 1]
    }

    pub fn log_price_row(&self, path: usize) -> &[f64] {
        let w = self.horizon + 1;
        &self.log_prices[path * w..(path + 1) * w]
    }

    pub fn variance_row(&self, path: usize) -> &[f64] {
        &self.variances[path * self.horizon..(path + 1) * self.horizon]
    }

    pub fn innovation_row(&self, path: usize) -> &[f64] {
        &self.innovations[path * self.horizon..(path + 1) * self.horizon]
    }

    /// Cross-path mean of `S_t`.
    pub fn mean_price(&self, t: usize) -> f64 {
        (0..self.n_paths).map(|i| self.price(i, t)).sum::<f64>() / self.n_paths as f64
    }

    /// Writes `path_id,t,S,sigma_sq,innovation`; the `t = 0` row leaves the last two fields empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path_id", "t", "S", "sigma_sq", "innovation"])?;
        for i in 0..self.n_paths {
            w.write_record([
                i.to_string(),
                "0".to_string(),
                format!("{:e}", self.price(i, 0)),
                String::new(),
                String::new(),
            ])?;
            for t in 1..=self.horizon {
                w.write_record([
                    i.to_string(),
                    t.to_string(),
                    format!("{:e}", self.price(i, t)),
                    format!("{:e}", self.variance(i, t)),
                    format!("{:e}", self.innovation(i, t)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_budget(n_paths: usize, horizon: usize, max_cells: usize) -> Result<()> {
    if n_paths == 0 || horizon == 0 {
        return Err(Error::Domain("n_paths and horizon must be >= 1".into()));
    }
    let cells = n_paths as u128 * horizon as u128;
    if cells > max_cells as u128 {
        return Err(Error::Resource {
            what: "simulation cells (paths x steps)".into(),
            requested: cells,
            limit: max_cells as u128,
        });
    }
    Ok(())
}

/// Simulates `n_paths` trajectories of `horizon` steps from `S_0`, `sigma_1^2` of the spec.
pub fn simulate(
    spec: &GarchSpec,
    measure: Measure,
    n_paths: usize,
    horizon: usize,
    key: StreamKey,
) -> Result<PathSet> {
    spec.validate()?;
    let start = GarchState::initial(spec)?;
    simulate_from(spec, &start, measure, n_paths, horizon, key, &SimOptions::default())
}

/// Simulates from an arbitrary state. Results depend only on `(key, path index)`,
/// never on how the batch is split across threads.
pub fn simulate_from(
    spec: &GarchSpec,
    start: &GarchState,
    measure: Measure,
    n_paths: usize,
    horizon: usize,
    key: StreamKey,
    opts: &SimOptions,
) -> Result<PathSet> {
    check_budget(n_paths, horizon, opts.max_cells)?;
    if measure == Measure::RiskNeutral {
        if spec.innov_var != 1.0 {
            return Err(Error::NotApplicable(
                "risk-neutral dynamics require unit innovation variance".into(),
            ));
        }
        if let Innovations::Lattice(_) = opts.innovations {
            return Err(Error::NotApplicable(
                "lattice innovations are simulated under the physical measure only".into(),
            ));
        }
    }
    let sd = spec.innov_var.sqrt();
    let w = horizon + 1;
    let mut log_prices = vec![0.0; n_paths * w];
    let mut variances = vec![0.0; n_paths * horizon];
    let mut innovations = vec![0.0; n_paths * horizon];
    const CHUNK: usize = 256;
    log_prices
        .par_chunks_mut(CHUNK * w)
        .zip(variances.par_chunks_mut(CHUNK * horizon))
        .zip(innovations.par_chunks_mut(CHUNK * horizon))
        .enumerate()
        .for_each(|(c, ((lp, var), inn))| {
            let first = (c * CHUNK) as u64;
            let rows = var.len() / horizon;
            for r in 0..rows {
                let mut rng = key.path_rng(first + r as u64);
                let mut st = *start;
                lp[r * w] = st.log_price;
                for t in 0..horizon {
                    let noise = match &opts.innovations {
                        Innovations::Gaussian => match measure {
                            Measure::Physical => sd * rng.normal(),
                            Measure::RiskNeutral => rng.normal(),
                        },
                        Innovations::Lattice(l) => l.sample(rng.uniform()),
                    };
                    let step = st.step(spec, measure, opts.representation, noise);
                    lp[r * w + t + 1] = st.log_price;
                    var[r * horizon + t] = step.variance;
                    inn[r * horizon + t] = noise;
                }
            }
        });
    Ok(PathSet {
        measure,
        representation: opts.representation,
        n_paths,
        horizon,
        log_prices,
        variances,
        innovations,
        seed: key.seed,
        stream_offset: key.stream_offset,
        ems_applied: false,
    })
}

/// Empirical martingale simulation: rescales prices so that the cross-path mean
/// equals `S_0` at every date.
///
/// `S*_i(t) = S_0 Z_i(t) / mean_j Z_j(t)` with `Z_i(t) = S*_i(t-1) S_i(t) / S_i(t-1)`.
/// Re-applying it to its own output reproduces the input.
pub fn ems_adjust(paths: &PathSet) -> Result<PathSet> {
    if paths.measure != Measure::RiskNeutral {
        return Err(Error::NotApplicable(
            "EMS applies to risk-neutral paths only".into(),
        ));
    }
    let n = paths.n_paths;
    let w = paths.horizon + 1;
    let mut out = paths.clone();
    let s0 = paths.price(0, 0);
    let mut adj_prev = vec![s0; n];
    let mut z = vec![0.0; n];
    for t in 1..w {
        for i in 0..n {
            let growth = (paths.log_prices[i * w + t] - paths.log_prices[i * w + t - 1]).exp();
            z[i] = adj_prev[i] * growth;
        }
        let mean = z.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            adj_prev[i] = s0 * z[i] / mean;
            out.log_prices[i * w + t] = adj_prev[i].ln();
        }
    }
    out.ems_applied = true;
    Ok(out)
}

/// Summary of a risk-neutral continuation batch started at time `k - 1`.
#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    /// `eps_tilde_k` of each path.
    pub first_noise: Vec<f64>,
    /// `S_k / S_{k-1}` (EMS-adjusted when requested).
    pub first_ratio: Vec<f64>,
    /// `S_T` (EMS-adjusted when requested).
    pub terminal: Vec<f64>,
}

const BATCH_BLOCK: usize = 8;

/// Reusable buffers for [`continuation_batch`].
#[derive(Debug, Default)]
pub struct BatchScratch {
    growth: Vec<f64>,
    z: Vec<f64>,
}

/// Simulates `n` risk-neutral continuations of `horizon` steps from `start` and
/// returns what the hedge-ratio estimators consume.
///
/// The batch reads stream 0 of `key` sequentially and is a serial unit of work.
/// With `ems` the paths are EMS-adjusted exactly as [`ems_adjust`] would, anchored at the start price.
#[allow(clippy::too_many_arguments)]
pub fn continuation_batch(
    spec: &GarchSpec,
    start: &GarchState,
    rep: Representation,
    horizon: usize,
    n: usize,
    key: StreamKey,
    ems: bool,
    scratch: &mut BatchScratch,
    out: &mut BatchOutcome,
) {
    let m = horizon;
    scratch.growth.resize(n * m, 0.0);
    out.first_noise.resize(n, 0.0);
    out.first_ratio.resize(n, 0.0);
    out.terminal.resize(n, 0.0);
    let s_start = start.price();
    let growth = &mut scratch.growth;
    let mut rng = key.path_rng(0);
    let kernel = garch11_kernel(spec, rep);
    // paths advance in blocks, in lockstep, so the per-path variance chains overlap;
    // draws are read in (block, step, path) order
    let mut i0 = 0;
    while i0 < n {
        let b = BATCH_BLOCK.min(n - i0);
        let mut states = [*start; BATCH_BLOCK];
        let mut log_s = [0.0; BATCH_BLOCK];
        for t in 0..m {
            for j in 0..b {
                let noise = rng.normal();
                if t == 0 {
                    out.first_noise[i0 + j] = noise;
                }
                let r = match &kernel {
                    Some(k) => {
                        let (r, next) = k.step(states[j].next_var, noise);
                        states[j].next_var = next;
                        r
                    }
                    None => states[j].step(spec, Measure::RiskNeutral, rep, noise).log_return,
                };
                growth[t * n + i0 + j] = r;
                log_s[j] += r;
            }
        }
        if !ems {
            for j in 0..b {
                out.first_ratio[i0 + j] = growth[i0 + j].exp();
                out.terminal[i0 + j] = (start.log_price + log_s[j]).exp();
            }
        }
        i0 += b;
    }
    if !ems {
        return;
    }
    scratch.z.resize(n, 0.0);
    let z = &mut scratch.z;
    let adj = &mut out.terminal;
    adj.iter_mut().for_each(|x| *x = s_start);
    for t in 0..m {
        let row = &growth[t * n..(t + 1) * n];
        let mut sum = 0.0;
        for i in 0..n {
            z[i] = adj[i] * row[i].exp();
            sum += z[i];
        }
        let scale = s_start * n as f64 / sum;
        for i in 0..n {
            adj[i] = z[i] * scale;
        }
        if t == 0 {
            for i in 0..n {
                out.first_ratio[i] = adj[i] / s_start;
            }
        }
    }
}

/// Risk-neutral one-lag recursion with the variant and representation resolved up front.
#[derive(Debug, Clone, Copy)]
struct Garch11Kernel {
    variant: crate::models::Variant,
    price_rep: bool,
    omega: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    lambda: f64,
    mu: f64,
}

impl Garch11Kernel {
    /// Log-return and next variance for current variance `var` and noise `eps_tilde`.
    #[inline(always)]
    fn step(&self, var: f64, noise: f64) -> (f64, f64) {
        use crate::models::Variant::*;
        let sigma = var.sqrt();
        let r = if self.price_rep { -0.5 * var + sigma * noise } else { sigma * noise };
        let news = match self.variant {
            DuanNGarch => {
                let shift = if self.price_rep { self.lambda } else { self.lambda - 0.5 * sigma };
                let e = noise - shift;
                var * e * e
            }
            HestonNandi => {
                let shift = if self.price_rep { (self.lambda + 0.5) * sigma } else { self.lambda * sigma };
                let z = noise - shift - self.gamma * sigma;
                z * z
            }
            AsymmetricGarch => {
                let drift = if self.price_rep { self.mu + 0.5 * var } else { self.mu };
                let rbar = sigma * noise - drift;
                let z = rbar.abs() - self.gamma * rbar;
                z * z
            }
        };
        (r, self.omega + self.alpha * news + self.beta * var)
    }
}

fn garch11_kernel(spec: &GarchSpec, rep: Representation) -> Option<Garch11Kernel> {
    if spec.alpha.len() > 1 || spec.beta.len() > 1 {
        return None;
    }
    Some(Garch11Kernel {
        variant: spec.variant,
        price_rep: rep == Representation::Price,
        omega: spec.omega,
        alpha: spec.alpha.first().copied().unwrap_or(0.0),
        beta: spec.beta.first().copied().unwrap_or(0.0),
        gamma: spec.gamma.first().copied().unwrap_or(0.0),
        lambda: spec.lambda,
        mu: spec.mu_const,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GarchSpec;

    fn duan() -> GarchSpec {
        GarchSpec::duan_reference()
    }

    #[test]
    fn constant_volatility_returns_are_normal() {
        // alpha = beta = 0: sigma^2 = omega for all n
        let v = 1e-4;
        let mu = 3e-4;
        let spec = GarchSpec::asymmetric(v, vec![0.0], vec![0.0], 0.0, mu).with_initial_variance(v);
        let n = 1000;
        let t = 1000;
        let p = simulate(&spec, Measure::Physical, n, t, StreamKey::new(5, 0)).unwrap();
        let mut sum = 0.0;
        for i in 0..n {
            for k in 1..=t {
                sum += p.log_price(i, k) - p.log_price(i, k - 1);
                assert!((p.variance(i, k) - v).abs() < 1e-18);
            }
        }
        let mean = sum / (n * t) as f64;
        assert!((mean - mu).abs() < 3.0 * (v / 1e6).sqrt(), "mean {mean}");
    }

    #[test]
    fn risk_neutral_prices_are_martingales() {
        let spec = duan();
        let p = simulate(&spec, Measure::RiskNeutral, 100_000, 5, StreamKey::new(9, 1)).unwrap();
        for t in 1..=5 {
            let prices: Vec<f64> = (0..p.n_paths).map(|i| p.price(i, t)).collect();
            let m = prices.iter().sum::<f64>() / prices.len() as f64;
            let var = prices.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (prices.len() - 1) as f64;
            let se = (var / prices.len() as f64).sqrt();
            assert!((m - spec.s0).abs() < 4.0 * se, "t={t} mean={m} se={se}");
        }
    }

    #[test]
    fn variances_respect_floor() {
        let spec = GarchSpec::asymmetric(2e-5, vec![0.15], vec![0.8], -0.4, 1e-3);
        let p = simulate(&spec, Measure::Physical, 500, 50, StreamKey::new(1, 2)).unwrap();
        assert!(p.variances.iter().all(|&v| v >= spec.omega));
    }

    #[test]
    fn ems_single_path_is_flat() {
        let p = simulate(&duan(), Measure::RiskNeutral, 1, 6, StreamKey::new(3, 3)).unwrap();
        let e = ems_adjust(&p).unwrap();
        for t in 0..=6 {
            assert!((e.price(0, t) - 100.0).abs() < 1e-10);
        }
    }

    #[test]
    fn ems_rejects_physical() {
        let p = simulate(&duan(), Measure::Physical, 4, 2, StreamKey::new(3, 3)).unwrap();
        assert!(matches!(ems_adjust(&p), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn ems_antithetic_pair_stays_symmetric() {
        // Two constant-volatility paths with shocks +x and -x. The closed-form
        // two-path recursion gives S*_1 = 2 S0 g_1 / (g_1 + g_2) and S*_2 = 2 S0 - S*_1.
        let v = 1e-4;
        let s0: f64 = 100.0;
        let shocks = [0.8, -0.3, 1.7];
        let mut lp = vec![s0.ln(); 8];
        for (t, x) in shocks.iter().enumerate() {
            lp[t + 1] = lp[t] - 0.5 * v + v.sqrt() * x;
            lp[4 + t + 1] = lp[4 + t] - 0.5 * v - v.sqrt() * x;
        }
        let paths = PathSet {
            measure: Measure::RiskNeutral,
            representation: Representation::Price,
            n_paths: 2,
            horizon: 3,
            log_prices: lp,
            variances: vec![v; 6],
            innovations: vec![0.0; 6],
            seed: 0,
            stream_offset: 0,
            ems_applied: false,
        };
        let e = ems_adjust(&paths).unwrap();
        let (mut a, mut b) = (s0, s0);
        for t in 1..=3 {
            let ga = (paths.log_price(0, t) - paths.log_price(0, t - 1)).exp();
            let gb = (paths.log_price(1, t) - paths.log_price(1, t - 1)).exp();
            let (za, zb) = (a * ga, b * gb);
            a = 2.0 * s0 * za / (za + zb);
            b = 2.0 * s0 - a;
            assert!((e.price(0, t) - a).abs() < 1e-10);
            assert!((e.price(1, t) - b).abs() < 1e-10);
            // symmetric about S0
            assert!((e.price(0, t) - s0 + e.price(1, t) - s0).abs() < 1e-10);
        }
    }

    /// Reference batch through the general recursion, same draw order as the batch.
    fn reference_batch(spec: &GarchSpec, start: &GarchState, m: usize, n: usize, key: StreamKey) -> PathSet {
        let mut rng = key.path_rng(0);
        let mut lp = vec![0.0; n * (m + 1)];
        let mut var = vec![0.0; n * m];
        let mut inn = vec![0.0; n * m];
        let mut i0 = 0;
        while i0 < n {
            let b = BATCH_BLOCK.min(n - i0);
            let mut st = vec![*start; b];
            for j in 0..b {
                lp[(i0 + j) * (m + 1)] = start.log_price;
            }
            for t in 0..m {
                for j in 0..b {
                    let i = i0 + j;
                    let noise = rng.normal();
                    let v = st[j].next_var;
                    st[j].step(spec, Measure::RiskNeutral, Representation::Price, noise);
                    lp[i * (m + 1) + t + 1] = st[j].log_price;
                    var[i * m + t] = v;
                    inn[i * m + t] = noise;
                }
            }
            i0 += b;
        }
        PathSet {
            measure: Measure::RiskNeutral,
            representation: Representation::Price,
            n_paths: n,
            horizon: m,
            log_prices: lp,
            variances: var,
            innovations: inn,
            seed: key.seed,
            stream_offset: key.stream_offset,
            ems_applied: false,
        }
    }

    #[test]
    fn batch_matches_reference_paths() {
        for spec in [duan(), GarchSpec::duan(1e-5, vec![0.1, 0.1], vec![0.7], 0.01)] {
            let start = GarchState::initial(&spec).unwrap();
            let key = StreamKey::new(21, 4);
            let n = 301;
            let full = reference_batch(&spec, &start, 4, n, key);
            let mut out = BatchOutcome::default();
            let mut scratch = BatchScratch::default();
            continuation_batch(&spec, &start, Representation::Price, 4, n, key, false, &mut scratch, &mut out);
            for i in 0..n {
                assert!((out.terminal[i] - full.price(i, 4)).abs() <= 1e-12 * full.price(i, 4));
                assert_eq!(out.first_noise[i], full.innovation(i, 1));
            }
            continuation_batch(&spec, &start, Representation::Price, 4, n, key, true, &mut scratch, &mut out);
            let ems = ems_adjust(&full).unwrap();
            for i in 0..n {
                assert!((out.terminal[i] - ems.price(i, 4)).abs() < 1e-9);
                assert!((out.first_ratio[i] * 100.0 - ems.price(i, 1)).abs() < 1e-9);
            }
            let mean = out.terminal.iter().sum::<f64>() / n as f64;
            assert!((mean - 100.0).abs() < 1e-10 * 100.0);
        }
    }

    #[test]
    fn one_lag_kernel_matches_general_recursion() {
        let specs = [
            duan(),
            GarchSpec::heston_nandi(1e-6, vec![1.3e-6], vec![0.6], vec![420.0], 2.0),
            GarchSpec::asymmetric(1e-5, vec![0.1], vec![0.8], 0.4, 3e-4),
        ];
        for spec in &specs {
            for rep in [Representation::Price, Representation::LogPrice] {
                let k = garch11_kernel(spec, rep).unwrap();
                let mut st = GarchState::initial(spec).unwrap();
                let mut var = st.next_var;
                let mut rng = StreamKey::new(3, 3).path_rng(0);
                for _ in 0..200 {
                    let noise = rng.normal();
                    let (r, next) = k.step(var, noise);
                    let step = st.step(spec, Measure::RiskNeutral, rep, noise);
                    assert!((r - step.log_return).abs() <= 1e-15);
                    assert!((next - st.next_var).abs() <= 1e-13 * next, "{:?} {rep:?}", spec.variant);
                    var = next;
                }
            }
        }
        let two = GarchSpec::duan(1e-5, vec![0.1, 0.1], vec![0.7], 0.01);
        assert!(garch11_kernel(&two, Representation::Price).is_none());
    }

    #[test]
    fn budget_is_enforced() {
        let spec = duan();
        let start = GarchState::initial(&spec).unwrap();
        let opts = SimOptions {
            max_cells: 100,
            ..SimOptions::default()
        };
        let err = simulate_from(&spec, &start, Measure::Physical, 11, 10, StreamKey::new(0, 0), &opts);
        assert!(matches!(err, Err(Error::Resource { .. })));
        assert!(simulate(&spec, Measure::Physical, 0, 10, StreamKey::new(0, 0)).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let p = simulate(&duan(), Measure::Physical, 2, 3, StreamKey::new(0, 0)).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,t,S,sigma_sq,innovation");
        assert_eq!(lines.len(), 1 + 2 * 4);
        let first: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(&first[..2], &["0", "0"]);
        assert!((first[2].parse::<f64>().unwrap() - 100.0).abs() < 1e-10);
        assert_eq!(&first[3..], &["", ""]);
    }
}
