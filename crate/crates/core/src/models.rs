//! GARCH model variants, parameter validation and conditional-variance recursions.
//!
//! Three families are supported:
//!
//! * asymmetric GARCH(p,q) with constant drift,
//!   `r_n = mu + sigma_n eps_n`,
//!   `sigma_n^2 = omega + sum_i alpha_i (|rbar_{n-i}| - gamma rbar_{n-i})^2 + sum_j beta_j sigma_{n-j}^2`;
//! * Duan's NGARCH with drift `lambda sigma_n - sigma_n^2 / 2` and
//!   `sigma_n^2 = omega + sum_i alpha_i sigma_{n-i}^2 eps_{n-i}^2 + sum_j beta_j sigma_{n-j}^2`;
//! * Heston-Nandi with drift `lambda sigma_n^2` and
//!   `sigma_n^2 = omega + sum_i alpha_i (eps_{n-i} - gamma_i sigma_{n-i})^2 + sum_j beta_j sigma_{n-j}^2`.
//!
//! Every recursion satisfies `sigma_n^2 >= omega`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{domain, Error, Result};

/// Maximum number of lags (`max(p, q)`) supported by the fixed-size state.
pub const MAX_LAG: usize = 8;

const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_MAX: usize = 10_000;
const ROOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    AsymmetricGarch,
    DuanNGarch,
    HestonNandi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Measure {
    Physical,
    RiskNeutral,
}

/// Which asset is made a martingale by the risk-neutral measure.
///
/// `LogPrice` removes the drift `mu_n` so that `s_n = log S_n` is a martingale;
/// `Price` removes `mu_n + sigma_n^2 / 2` so that `S_n` itself is one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Representation {
    LogPrice,
    Price,
}

/// A fully parameterized GARCH model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarchSpec {
    pub variant: Variant,
    /// Variance intercept (`omega`, `alpha_0`).
    pub omega: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// One entry for the asymmetric model, one per `alpha` for Heston-Nandi, none for Duan.
    #[serde(default)]
    pub gamma: Vec<f64>,
    /// Unit risk premium (Duan, Heston-Nandi).
    #[serde(default)]
    pub lambda: f64,
    /// Constant log-return drift (asymmetric GARCH).
    #[serde(default)]
    pub mu_const: f64,
    /// Innovation variance; the Gaussian measure changes require 1.
    #[serde(default = "one")]
    pub innov_var: f64,
    /// First conditional variance `sigma_1^2`; the long-run variance when absent.
    #[serde(default)]
    pub sigma0_sq: Option<f64>,
    #[serde(default = "hundred")]
    pub s0: f64,
}

fn one() -> f64 {
    1.0
}

fn hundred() -> f64 {
    100.0
}

impl GarchSpec {
    pub fn asymmetric(omega: f64, alpha: Vec<f64>, beta: Vec<f64>, gamma: f64, mu: f64) -> Self {
        GarchSpec {
            variant: Variant::AsymmetricGarch,
            omega,
            alpha,
            beta,
            gamma: vec![gamma],
            lambda: 0.0,
            mu_const: mu,
            innov_var: 1.0,
            sigma0_sq: None,
            s0: 100.0,
        }
    }

    pub fn duan(omega: f64, alpha: Vec<f64>, beta: Vec<f64>, lambda: f64) -> Self {
        GarchSpec {
            variant: Variant::DuanNGarch,
            omega,
            alpha,
            beta,
            gamma: Vec::new(),
            lambda,
            mu_const: 0.0,
            innov_var: 1.0,
            sigma0_sq: None,
            s0: 100.0,
        }
    }

    pub fn heston_nandi(
        omega: f64,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        gamma: Vec<f64>,
        lambda: f64,
    ) -> Self {
        GarchSpec {
            variant: Variant::HestonNandi,
            omega,
            alpha,
            beta,
            gamma,
            lambda,
            mu_const: 0.0,
            innov_var: 1.0,
            sigma0_sq: None,
            s0: 100.0,
        }
    }

    /// The Duan NGARCH(1,1) used in the hedging experiment:
    /// `alpha_0 = 1e-5`, `alpha_1 = 0.2`, `beta_1 = 0.7`, `lambda = 0.01`, `S_0 = 100`.
    pub fn duan_reference() -> Self {
        GarchSpec::duan(1e-5, vec![0.2], vec![0.7], 0.01)
    }

    pub fn with_s0(mut self, s0: f64) -> Self {
        self.s0 = s0;
        self
    }

    pub fn with_initial_variance(mut self, v: f64) -> Self {
        self.sigma0_sq = Some(v);
        self
    }

    pub fn with_innovation_variance(mut self, v: f64) -> Self {
        self.innov_var = v;
        self
    }

    /// Number of lags `max(p, q)` carried by the recursion.
    pub fn lags(&self) -> usize {
        self.alpha.len().max(self.beta.len()).max(1)
    }

    /// Checks the type invariants of every variant.
    pub fn validate(&self) -> Result<()> {
        let finite = |x: f64| x.is_finite();
        if !(self.omega > 0.0) || !finite(self.omega) {
            return domain(format!("omega must be > 0, got {}", self.omega));
        }
        if self.alpha.iter().chain(&self.beta).any(|&x| !(x >= 0.0) || !finite(x)) {
            return domain("alpha and beta coefficients must be finite and >= 0");
        }
        if self.alpha.len() > MAX_LAG || self.beta.len() > MAX_LAG {
            return domain(format!("at most {MAX_LAG} alpha and beta lags are supported"));
        }
        if !(self.innov_var > 0.0) || !finite(self.innov_var) {
            return domain(format!("innovation variance must be > 0, got {}", self.innov_var));
        }
        if !(self.s0 > 0.0) || !finite(self.s0) {
            return domain(format!("s0 must be > 0, got {}", self.s0));
        }
        if let Some(v) = self.sigma0_sq {
            if !(v >= self.omega) || !finite(v) {
                return domain(format!("sigma0_sq must be >= omega, got {v}"));
            }
        }
        if !finite(self.lambda) || !finite(self.mu_const) {
            return domain("lambda and mu_const must be finite");
        }
        match self.variant {
            Variant::AsymmetricGarch => {
                if self.gamma.len() != 1 {
                    return domain("asymmetric GARCH takes exactly one gamma");
                }
                if !(self.gamma[0].abs() < 1.0) {
                    return domain(format!("|gamma| must be < 1, got {}", self.gamma[0]));
                }
            }
            Variant::DuanNGarch => {
                if !self.gamma.is_empty() {
                    return domain("Duan NGARCH takes no gamma");
                }
            }
            Variant::HestonNandi => {
                if self.gamma.len() != self.alpha.len() {
                    return domain("Heston-Nandi takes one gamma per alpha");
                }
                if self.gamma.iter().any(|g| !g.is_finite()) {
                    return domain("gamma must be finite");
                }
            }
        }
        Ok(())
    }

    /// `E[sigma_n^2]` of the stationary solution, if it exists.
    pub fn long_run_variance(&self) -> Option<f64> {
        let (persistence, intercept) = self.persistence();
        (persistence < 1.0).then(|| intercept / (1.0 - persistence))
    }

    /// `(persistence, intercept)` of the first-moment recursion
    /// `E[sigma^2] = intercept + persistence * E[sigma^2]`.
    fn persistence(&self) -> (f64, f64) {
        let sa: f64 = self.alpha.iter().sum();
        let sb: f64 = self.beta.iter().sum();
        match self.variant {
            Variant::AsymmetricGarch => {
                let g = self.gamma[0];
                ((1.0 + g * g) * self.innov_var * sa + sb, self.omega)
            }
            Variant::DuanNGarch => (self.innov_var * sa + sb, self.omega),
            Variant::HestonNandi => {
                let sc: f64 = self
                    .alpha
                    .iter()
                    .zip(&self.gamma)
                    .map(|(a, g)| a * g * g)
                    .sum();
                (sc + sb, self.omega + self.innov_var * sa)
            }
        }
    }

    /// The conditional variance `sigma_1^2` at the first step.
    pub fn initial_variance(&self) -> Result<f64> {
        match self.sigma0_sq {
            Some(v) => Ok(v),
            None => self.long_run_variance().ok_or_else(|| {
                Error::Domain("non-stationary spec needs an explicit sigma0_sq".into())
            }),
        }
    }

    /// Drift `mu_n` of the log-return as a function of the current variance.
    #[inline]
    pub fn drift(&self, var: f64) -> f64 {
        match self.variant {
            Variant::AsymmetricGarch => self.mu_const,
            Variant::DuanNGarch => self.lambda * var.sqrt() - 0.5 * var,
            Variant::HestonNandi => self.lambda * var,
        }
    }

    /// Price-representation drift `mu_n + sigma_n^2 / 2`.
    #[inline]
    pub fn price_drift(&self, var: f64) -> f64 {
        self.drift(var) + 0.5 * var
    }

    /// Innovation shift `eps_tilde - eps` of the risk-neutral measure.
    #[inline]
    pub fn innovation_shift(&self, var: f64, rep: Representation) -> f64 {
        let sigma = var.sqrt();
        match rep {
            Representation::LogPrice => self.drift(var) / sigma,
            Representation::Price => self.price_drift(var) / sigma,
        }
    }

    /// Upper bound `B` on the drift for the variants where it is known in closed form.
    ///
    /// Constant drift gives `|mu|`; Duan's drift satisfies `mu_n < lambda^2 / 2`.
    /// Heston-Nandi's drift grows with the variance, so no global bound exists.
    pub fn drift_bound(&self) -> Option<f64> {
        match self.variant {
            Variant::AsymmetricGarch => Some(self.mu_const.abs()),
            Variant::DuanNGarch => Some(0.5 * self.lambda * self.lambda),
            Variant::HestonNandi => None,
        }
    }

    /// Physical-measure variance recursion from the lag window
    /// (`var_lags[i]` = `sigma_{n-i}^2`, `eps_lags[i]` = `eps_{n-i}`, most recent first).
    #[inline]
    pub(crate) fn next_variance(&self, var_lags: &[f64], eps_lags: &[f64]) -> f64 {
        let mut v = self.omega;
        match self.variant {
            Variant::AsymmetricGarch => {
                let g = self.gamma[0];
                for (i, a) in self.alpha.iter().enumerate() {
                    let rbar = var_lags[i].sqrt() * eps_lags[i];
                    let z = rbar.abs() - g * rbar;
                    v += a * z * z;
                }
            }
            Variant::DuanNGarch => {
                for (i, a) in self.alpha.iter().enumerate() {
                    v += a * var_lags[i] * eps_lags[i] * eps_lags[i];
                }
            }
            Variant::HestonNandi => {
                for (i, (a, g)) in self.alpha.iter().zip(&self.gamma).enumerate() {
                    let z = eps_lags[i] - g * var_lags[i].sqrt();
                    v += a * z * z;
                }
            }
        }
        for (j, b) in self.beta.iter().enumerate() {
            v += b * var_lags[j];
        }
        v
    }
}

/// Past conditional variances and innovations, most recent first.
///
/// The innovations are those of the measure passed to [`step_variance`]:
/// `eps` under the physical measure, `eps_tilde` under the risk-neutral one.
#[derive(Debug, Clone, PartialEq)]
pub struct LagWindow {
    pub variances: Vec<f64>,
    pub innovations: Vec<f64>,
}

/// Next conditional variance under the given measure.
///
/// The risk-neutral branch is written in terms of `eps_tilde` of the price
/// representation: Duan uses `(eps_tilde - lambda)`, Heston-Nandi
/// `(eps_tilde - (lambda + gamma_i + 1/2) sigma)`, and the asymmetric model
/// `rbar = sigma eps_tilde - mu - sigma^2 / 2`.
pub fn step_variance(spec: &GarchSpec, window: &LagWindow, measure: Measure) -> Result<f64> {
    let need = spec.lags();
    if window.variances.len() < need || window.innovations.len() < spec.alpha.len() {
        return Err(Error::Mismatch(format!(
            "lag window needs {need} variances and {} innovations",
            spec.alpha.len()
        )));
    }
    let vars = &window.variances;
    let eps = &window.innovations;
    let mut v = spec.omega;
    match (spec.variant, measure) {
        (_, Measure::Physical) => {
            let mut e = [0.0; MAX_LAG];
            e[..spec.alpha.len()].copy_from_slice(&eps[..spec.alpha.len()]);
            return Ok(spec.next_variance(vars, &e));
        }
        (Variant::DuanNGarch, Measure::RiskNeutral) => {
            for (i, a) in spec.alpha.iter().enumerate() {
                let z = eps[i] - spec.lambda;
                v += a * vars[i] * z * z;
            }
        }
        (Variant::HestonNandi, Measure::RiskNeutral) => {
            for (i, (a, g)) in spec.alpha.iter().zip(&spec.gamma).enumerate() {
                let z = eps[i] - (spec.lambda + g + 0.5) * vars[i].sqrt();
                v += a * z * z;
            }
        }
        (Variant::AsymmetricGarch, Measure::RiskNeutral) => {
            let g = spec.gamma[0];
            for (i, a) in spec.alpha.iter().enumerate() {
                let rbar = vars[i].sqrt() * eps[i] - spec.mu_const - 0.5 * vars[i];
                let z = rbar.abs() - g * rbar;
                v += a * z * z;
            }
        }
    }
    for (j, b) in spec.beta.iter().enumerate() {
        v += b * vars[j];
    }
    Ok(v)
}

/// Running state of one trajectory: log-price, the predictable next variance
/// and the lag window of *physical* innovations.
///
/// Keeping physical innovations in the window makes the variance recursion
/// identical under every measure; risk-neutral draws are mapped back through
/// `eps = eps_tilde - shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GarchState {
    pub log_price: f64,
    /// `sigma_{n+1}^2`, known at time `n`.
    pub next_var: f64,
    var_lags: [f64; MAX_LAG],
    eps_lags: [f64; MAX_LAG],
}

/// Outcome of one step of the recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub log_return: f64,
    pub variance: f64,
    /// Physical innovation `eps_n`.
    pub eps: f64,
}

impl GarchState {
    /// Time-0 state. Pre-sample variances are set to `sigma_1^2` and pre-sample innovations to 0.
    pub fn initial(spec: &GarchSpec) -> Result<Self> {
        let v = spec.initial_variance()?;
        Ok(GarchState {
            log_price: spec.s0.ln(),
            next_var: v,
            var_lags: [v; MAX_LAG],
            eps_lags: [0.0; MAX_LAG],
        })
    }

    pub fn price(&self) -> f64 {
        self.log_price.exp()
    }

    /// Most recent past variance `sigma_n^2` (pre-sample value at time 0).
    pub fn last_variance(&self) -> f64 {
        self.var_lags[0]
    }

    /// Advances one step with `noise` drawn from the innovation law of `measure`.
    #[inline]
    pub fn advance(
        &mut self,
        spec: &GarchSpec,
        measure: Measure,
        rep: Representation,
        noise: f64,
    ) -> Step {
        let var = self.next_var;
        let sigma = var.sqrt();
        let (log_return, eps) = match measure {
            Measure::Physical => (spec.drift(var) + sigma * noise, noise),
            Measure::RiskNeutral => match rep {
                Representation::Price => (
                    -0.5 * var + sigma * noise,
                    noise - spec.price_drift(var) / sigma,
                ),
                Representation::LogPrice => (sigma * noise, noise - spec.drift(var) / sigma),
            },
        };
        self.push(var, eps);
        self.log_price += log_return;
        Step {
            log_return,
            variance: var,
            eps,
        }
    }

    /// Advances with a given physical innovation and an explicit log-return
    /// (used by lattice dynamics whose compensator is not `sigma^2 / 2`).
    #[inline]
    pub(crate) fn advance_raw(&mut self, log_return: f64, eps: f64) {
        let var = self.next_var;
        self.push(var, eps);
        self.log_price += log_return;
    }

    #[inline]
    fn push(&mut self, var: f64, eps: f64) {
        self.var_lags.copy_within(0..MAX_LAG - 1, 1);
        self.eps_lags.copy_within(0..MAX_LAG - 1, 1);
        self.var_lags[0] = var;
        self.eps_lags[0] = eps;
    }

    /// Recomputes `next_var` from the lag window.
    #[inline]
    pub(crate) fn refresh(&mut self, spec: &GarchSpec) {
        self.next_var = spec.next_variance(&self.var_lags, &self.eps_lags);
    }

    /// `advance` followed by the variance update, the usual one-step move.
    #[inline]
    pub fn step(
        &mut self,
        spec: &GarchSpec,
        measure: Measure,
        rep: Representation,
        noise: f64,
    ) -> Step {
        let s = self.advance(spec, measure, rep, noise);
        self.refresh(spec);
        s
    }

    /// Lag window expressed in physical innovations.
    pub fn window(&self, spec: &GarchSpec) -> LagWindow {
        let l = spec.lags();
        LagWindow {
            variances: self.var_lags[..l].to_vec(),
            innovations: self.eps_lags[..spec.alpha.len()].to_vec(),
        }
    }
}

/// Spectral radius of a moment matrix and whether the condition holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentCheck {
    pub spectral_radius: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub stationary: bool,
    pub long_run_variance: Option<f64>,
    pub moment_orders_checked: BTreeMap<u32, MomentCheck>,
    pub kurtosis_finite: Option<bool>,
    pub theoretical_kurtosis: Option<f64>,
}

/// Second-order stationarity plus, where applicable, the m = 1, 2 moment conditions
/// and the theoretical kurtosis.
pub fn validate_stationarity(spec: &GarchSpec) -> Result<ValidationReport> {
    spec.validate()?;
    let stationary = match spec.variant {
        Variant::HestonNandi => heston_nandi_max_root(spec) < 1.0 - ROOT_TOL,
        _ => spec.persistence().0 < 1.0,
    };
    let long_run_variance = if stationary {
        spec.long_run_variance()
    } else {
        None
    };
    let mut moment_orders_checked = BTreeMap::new();
    let mut kurtosis_finite = None;
    let mut theoretical = None;
    if spec.variant != Variant::HestonNandi {
        for m in [1u32, 2] {
            moment_orders_checked.insert(m, check_moment_condition(spec, m)?);
        }
        let finite = moment_orders_checked[&2].satisfied;
        kurtosis_finite = Some(finite);
        if finite && stationary {
            let (mean, var) = variance_moments(spec)?;
            theoretical = Some(theoretical_kurtosis(var, mean)?);
        }
    }
    Ok(ValidationReport {
        stationary,
        long_run_variance,
        moment_orders_checked,
        kurtosis_finite,
        theoretical_kurtosis: theoretical,
    })
}

/// Largest root modulus of `x^L - sum_i (beta_i + alpha_i gamma_i^2) x^{L-i}`.
fn heston_nandi_max_root(spec: &GarchSpec) -> f64 {
    let l = spec.lags();
    let coef: Vec<f64> = (0..l)
        .map(|i| {
            let b = spec.beta.get(i).copied().unwrap_or(0.0);
            let a = spec.alpha.get(i).copied().unwrap_or(0.0);
            let g = spec.gamma.get(i).copied().unwrap_or(0.0);
            b + a * g * g
        })
        .collect();
    let mut companion = DMatrix::<f64>::zeros(l, l);
    for (i, c) in coef.iter().enumerate() {
        companion[(0, i)] = *c;
    }
    for i in 1..l {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re * z.re + z.im * z.im).sqrt())
        .fold(0.0, f64::max)
}

/// `E[Z^j]` for `Z = (|eps| - gamma eps)^2`, `eps ~ N(0, v)`.
pub(crate) fn z_moment(gamma: f64, v: f64, j: u32) -> f64 {
    let double_factorial: f64 = (1..=j).map(|i| (2 * i - 1) as f64).product();
    let j = j as i32;
    0.5 * ((1.0 - gamma).powi(2 * j) + (1.0 + gamma).powi(2 * j)) * double_factorial * v.powi(j)
}

fn asymmetry(spec: &GarchSpec) -> Result<f64> {
    match spec.variant {
        Variant::AsymmetricGarch => Ok(spec.gamma[0]),
        // Duan's variance recursion is the symmetric (gamma = 0) case.
        Variant::DuanNGarch => Ok(0.0),
        Variant::HestonNandi => Err(Error::NotApplicable(
            "moment condition is stated for the asymmetric GARCH recursion only".into(),
        )),
    }
}

/// Splits the random companion matrix as `A = A0 + Z * A1`.
fn companion_parts(spec: &GarchSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = spec.alpha.len();
    let q = spec.beta.len();
    let d = p + q;
    let mut a0 = DMatrix::zeros(d, d);
    let mut a1 = DMatrix::zeros(d, d);
    let coeffs: Vec<f64> = spec.alpha.iter().chain(&spec.beta).copied().collect();
    for (c, v) in coeffs.iter().enumerate() {
        if p > 0 {
            a1[(0, c)] = *v;
        }
        if q > 0 {
            a0[(p, c)] = *v;
        }
    }
    for i in 1..p {
        a0[(i, i - 1)] = 1.0;
    }
    for j in 1..q {
        a0[(p + j, p + j - 1)] = 1.0;
    }
    (a0, a1)
}

/// Assembles `E[A^{(x) m}]` from closed-form Gaussian moments of `Z`.
pub fn moment_matrix(spec: &GarchSpec, m: u32) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let gamma = asymmetry(spec)?;
    if m == 0 {
        return domain("moment order m must be >= 1");
    }
    let (a0, a1) = companion_parts(spec);
    let d = a0.nrows();
    if d == 0 {
        return domain("model has no alpha or beta terms");
    }
    let dim = (d as u128).pow(m);
    if dim > 4096 {
        return Err(Error::Resource {
            what: "Kronecker moment matrix dimension".into(),
            requested: dim,
            limit: 4096,
        });
    }
    let dim = dim as usize;
    let mut total = DMatrix::zeros(dim, dim);
    for mask in 0u32..(1 << m) {
        let mut prod = DMatrix::from_element(1, 1, 1.0);
        for i in 0..m {
            let factor = if mask & (1 << i) != 0 { &a1 } else { &a0 };
            prod = prod.kronecker(factor);
        }
        let k = mask.count_ones();
        let ez = if k == 0 { 1.0 } else { z_moment(gamma, spec.innov_var, k) };
        total += prod * ez;
    }
    Ok(total)
}

/// Perron root of a non-negative matrix by power iteration on `M + cI`, `c` the
/// largest column sum. The geometric tail of the iterates is extrapolated
/// (Aitken) once its ratio settles.
pub fn spectral_radius_nonneg(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let c = m.column_iter().map(|col| col.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    if c == 0.0 {
        return 0.0;
    }
    let shifted = m + DMatrix::<f64>::identity(n, n) * c;
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = f64::NAN;
    let mut prev_delta = f64::NAN;
    let tol = POWER_ITER_TOL * 1e-3;
    for _ in 0..POWER_ITER_MAX {
        let y = &shifted * &x;
        let norm: f64 = y.iter().map(|v| v.abs()).sum();
        let next = norm - c;
        x = y / norm;
        let delta = next - estimate;
        let scale = next.abs().max(1.0);
        if delta == 0.0 {
            return next;
        }
        let r = delta / prev_delta;
        if delta.abs() <= 1e-8 * scale && r.abs() < 0.999 {
            let tail = delta * r / (1.0 - r);
            if tail.abs() <= tol * scale {
                return next + tail;
            }
        }
        prev_delta = delta;
        estimate = next;
    }
    estimate
}

/// Moment condition `rho(E[A^{(x) m}]) < 1` for the existence of the moment of order `2m`.
pub fn check_moment_condition(spec: &GarchSpec, m: u32) -> Result<MomentCheck> {
    let mat = moment_matrix(spec, m)?;
    let rho = spectral_radius_nonneg(&mat);
    Ok(MomentCheck {
        spectral_radius: rho,
        satisfied: rho < 1.0,
    })
}

/// `3 + 3 var(sigma^2) / E[sigma^2]^2`.
pub fn theoretical_kurtosis(var_sigma_sq: f64, mean_sigma_sq: f64) -> Result<f64> {
    if !(mean_sigma_sq > 0.0) {
        return domain("mean of sigma^2 must be > 0");
    }
    if !(var_sigma_sq >= 0.0) {
        return domain("variance of sigma^2 must be >= 0");
    }
    Ok(3.0 + 3.0 * var_sigma_sq / (mean_sigma_sq * mean_sigma_sq))
}

/// Stationary `(E[sigma^2], var(sigma^2))` from the first two moments of the
/// companion recursion `X_t = A_t X_{t-1} + b_t`.
///
/// Requires the m = 2 moment condition.
pub fn variance_moments(spec: &GarchSpec) -> Result<(f64, f64)> {
    let gamma = asymmetry(spec)?;
    if !check_moment_condition(spec, 2)?.satisfied {
        return domain("fourth moment is infinite (m = 2 condition fails)");
    }
    let (a0, a1) = companion_parts(spec);
    let p = spec.alpha.len();
    let q = spec.beta.len();
    let d = p + q;
    let w = spec.omega;
    let ez = z_moment(gamma, spec.innov_var, 1);
    let ez2 = z_moment(gamma, spec.innov_var, 2);

    let mut u1 = DVector::zeros(d);
    let mut u0 = DVector::zeros(d);
    if p > 0 {
        u1[0] = 1.0;
    }
    if q > 0 {
        u0[p] = 1.0;
    }
    let ea = &a0 + &a1 * ez;
    let eb = (&u1 * ez + &u0) * w;
    let id = DMatrix::<f64>::identity(d, d);
    let m1 = (&id - &ea)
        .lu()
        .solve(&eb)
        .ok_or_else(|| Error::Domain("first-moment system is singular".into()))?;

    let as_mat = |v: &DVector<f64>| DMatrix::from_column_slice(d, 1, v.as_slice());
    let (u0m, u1m) = (as_mat(&u0), as_mat(&u1));
    // E[A (x) b] and E[b (x) A], each d^2 x d.
    let e_ab = (a0.kronecker(&u1m) * ez + a0.kronecker(&u0m) + a1.kronecker(&u1m) * ez2
        + a1.kronecker(&u0m) * ez)
        * w;
    let e_ba = (u1m.kronecker(&a0) * ez + u0m.kronecker(&a0) + u1m.kronecker(&a1) * ez2
        + u0m.kronecker(&a1) * ez)
        * w;
    let e_bb = (u1.kronecker(&u1) * ez2 + (u1.kronecker(&u0) + u0.kronecker(&u1)) * ez
        + u0.kronecker(&u0))
        * (w * w);
    let eaa = moment_matrix(spec, 2)?;
    let id2 = DMatrix::<f64>::identity(d * d, d * d);
    let rhs = (e_ab + e_ba) * &m1 + e_bb;
    let m2 = (&id2 - eaa)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Domain("second-moment system is singular".into()))?;

    let c = DVector::from_iterator(d, spec.alpha.iter().chain(&spec.beta).copied());
    let mean = w + c.dot(&m1);
    let second = w * w + 2.0 * w * c.dot(&m1) + c.kronecker(&c).dot(&m2);
    Ok((mean, (second - mean * mean).max(0.0)))
}
