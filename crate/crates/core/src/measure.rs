//! Changes of measure: Girsanov densities for the log-price and price
//! representations, the innovation transformation, the minimal martingale
//! measure and the statistical checks used to validate them.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{domain, Error, Result};
use crate::models::{GarchSpec, Measure, Representation};
use crate::simulate::{Innovations, PathSet};

/// Anderson-Darling 1% critical value for a fully specified null.
pub const AD_CRITICAL_1PCT: f64 = 3.857;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DensityKind {
    LogRepGirsanov,
    PriceRepGirsanov,
    MinimalMartingale,
}

/// `Z_0 .. Z_T` per path, stored as `ln |Z|` and a sign.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityProcess {
    pub kind: DensityKind,
    pub n_paths: usize,
    pub horizon: usize,
    /// `n_paths x (horizon + 1)`, first column 0.
    pub log_abs: Vec<f64>,
    pub sign: Vec<i8>,
}

impl DensityProcess {
    pub fn value(&self, path: usize, t: usize) -> f64 {
        let i = path * (self.horizon + 1) + t;
        f64::from(self.sign[i]) * self.log_abs[i].exp()
    }

    pub fn terminal(&self, path: usize) -> f64 {
        self.value(path, self.horizon)
    }

    pub fn terminal_values(&self) -> Vec<f64> {
        (0..self.n_paths).map(|i| self.terminal(i)).collect()
    }

    pub fn all_positive(&self) -> bool {
        self.sign.iter().all(|&s| s > 0)
    }

    /// Sample mean of `Z_T` and its standard error.
    pub fn terminal_mean(&self) -> (f64, f64) {
        mean_and_se(&self.terminal_values())
    }
}

pub(crate) fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

fn require_physical(paths: &PathSet) -> Result<()> {
    if paths.measure != Measure::Physical {
        return Err(Error::NotApplicable("expected physical-measure paths".into()));
    }
    Ok(())
}

fn require_gaussian(spec: &GarchSpec) -> Result<()> {
    if spec.innov_var != 1.0 {
        return Err(Error::NotApplicable(
            "Gaussian changes of measure require unit innovation variance".into(),
        ));
    }
    Ok(())
}

fn girsanov(paths: &PathSet, spec: &GarchSpec, rep: Representation) -> Result<DensityProcess> {
    require_physical(paths)?;
    require_gaussian(spec)?;
    let t = paths.horizon;
    let mut log_abs = vec![0.0; paths.n_paths * (t + 1)];
    for i in 0..paths.n_paths {
        let mut acc = 0.0;
        for k in 1..=t {
            let var = paths.variance(i, k);
            let theta = spec.innovation_shift(var, rep);
            acc += -theta * paths.innovation(i, k) - 0.5 * theta * theta;
            log_abs[i * (t + 1) + k] = acc;
        }
    }
    Ok(DensityProcess {
        kind: match rep {
            Representation::LogPrice => DensityKind::LogRepGirsanov,
            Representation::Price => DensityKind::PriceRepGirsanov,
        },
        n_paths: paths.n_paths,
        horizon: t,
        sign: vec![1; log_abs.len()],
        log_abs,
    })
}

/// `Z_n = prod_k exp(-(mu_k / sigma_k) eps_k - mu_k^2 / (2 sigma_k^2))`.
pub fn girsanov_logrep_density(paths: &PathSet, spec: &GarchSpec) -> Result<DensityProcess> {
    girsanov(paths, spec, Representation::LogPrice)
}

/// As [`girsanov_logrep_density`] with `mu_k + sigma_k^2 / 2` in place of `mu_k`.
pub fn girsanov_pricerep_density(paths: &PathSet, spec: &GarchSpec) -> Result<DensityProcess> {
    girsanov(paths, spec, Representation::Price)
}

/// Maps physical innovations to `eps_tilde = eps + shift`; prices are unchanged.
pub fn transform_innovations(
    paths: &PathSet,
    spec: &GarchSpec,
    rep: Representation,
) -> Result<PathSet> {
    require_physical(paths)?;
    require_gaussian(spec)?;
    let mut out = paths.clone();
    let t = paths.horizon;
    for i in 0..paths.n_paths {
        for k in 0..t {
            let var = paths.variances[i * t + k];
            out.innovations[i * t + k] += spec.innovation_shift(var, rep);
        }
    }
    out.measure = Measure::RiskNeutral;
    out.representation = rep;
    out.ems_applied = false;
    Ok(out)
}

/// Inverse of [`transform_innovations`].
pub fn recover_physical(q_paths: &PathSet, spec: &GarchSpec) -> Result<PathSet> {
    if q_paths.measure != Measure::RiskNeutral {
        return Err(Error::NotApplicable("expected risk-neutral paths".into()));
    }
    if q_paths.ems_applied {
        return Err(Error::NotApplicable(
            "EMS-adjusted prices no longer follow the model recursion".into(),
        ));
    }
    let mut out = q_paths.clone();
    let t = q_paths.horizon;
    for i in 0..q_paths.n_paths {
        for k in 0..t {
            let var = q_paths.variances[i * t + k];
            out.innovations[i * t + k] -= spec.innovation_shift(var, q_paths.representation);
        }
    }
    out.measure = Measure::Physical;
    Ok(out)
}

/// `1 - mu_k eps_k / (sigma^2 sigma_k)`.
#[inline]
pub fn mmm_factor(spec: &GarchSpec, var: f64, eps: f64) -> f64 {
    1.0 - spec.drift(var) * eps / (spec.innov_var * var.sqrt())
}

/// Drift bound `B`: closed form where known, otherwise the largest `|mu_n|`
/// over the supplied conditional variances.
pub fn observed_drift_bound(spec: &GarchSpec, variances: &[f64]) -> f64 {
    spec.drift_bound().unwrap_or_else(|| {
        variances
            .iter()
            .map(|&v| spec.drift(v).abs())
            .fold(0.0, f64::max)
    })
}

/// Upper bound `exp(n B^2 / omega^2)` on `E[Z_n^2]`, when `B` is known in closed form.
pub fn square_moment_bound(spec: &GarchSpec, n: usize) -> Option<f64> {
    spec.drift_bound()
        .map(|b| (n as f64 * b * b / (spec.omega * spec.omega)).exp())
}

/// Minimal martingale measure density and its existence diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MmmDensity {
    pub density: DensityProcess,
    pub exists: bool,
    /// Innovation bound `K`; `None` for unbounded (Gaussian) innovations.
    pub innovation_bound: Option<f64>,
    pub drift_bound: f64,
    /// `sigma^2 sqrt(omega) / B`.
    pub threshold: f64,
    pub all_factors_positive: bool,
}

/// `Z = prod_k (1 - mu_k eps_k / (sigma^2 sigma_k))`.
///
/// The measure exists iff the innovations are bounded with `K < sigma^2 sqrt(omega) / B`;
/// Gaussian innovations are reported as non-existence, with the density still computed.
pub fn mmm_density(
    paths: &PathSet,
    spec: &GarchSpec,
    innovations: &Innovations,
) -> Result<MmmDensity> {
    require_physical(paths)?;
    let t = paths.horizon;
    let b = observed_drift_bound(spec, &paths.variances);
    let threshold = if b > 0.0 {
        spec.innov_var * spec.omega.sqrt() / b
    } else {
        f64::INFINITY
    };
    let innovation_bound = match innovations {
        Innovations::Gaussian => None,
        Innovations::Lattice(l) => Some(l.bound()),
    };
    let mut log_abs = vec![0.0; paths.n_paths * (t + 1)];
    let mut sign = vec![1i8; paths.n_paths * (t + 1)];
    let mut positive = true;
    for i in 0..paths.n_paths {
        let mut acc = 0.0;
        let mut sg = 1i8;
        for k in 1..=t {
            let f = mmm_factor(spec, paths.variance(i, k), paths.innovation(i, k));
            if f <= 0.0 {
                positive = false;
            }
            acc += f.abs().ln();
            if f < 0.0 {
                sg = -sg;
            }
            log_abs[i * (t + 1) + k] = acc;
            sign[i * (t + 1) + k] = if f == 0.0 { 0 } else { sg };
        }
    }
    let exists = match innovation_bound {
        None => false,
        Some(k) => k < threshold,
    };
    Ok(MmmDensity {
        density: DensityProcess {
            kind: DensityKind::MinimalMartingale,
            n_paths: paths.n_paths,
            horizon: t,
            log_abs,
            sign,
        },
        exists,
        innovation_bound,
        drift_bound: b,
        threshold,
        all_factors_positive: positive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AndersonDarling {
    pub statistic: f64,
    /// `(sum w)^2 / sum w^2`; the sample size when unweighted.
    pub n_eff: f64,
    pub critical_value: f64,
    pub passed: bool,
}

/// Anderson-Darling test of `N(0, 1)` at the 1% level, optionally with sample weights
/// (e.g. a density `Z_T` turning physical samples into risk-neutral ones).
///
/// The weighted empirical CDF is integrated exactly against `dF / (F (1 - F))`
/// interval by interval; with equal weights this is the usual `A^2`.
pub fn anderson_darling_normal(samples: &[f64], weights: Option<&[f64]>) -> Result<AndersonDarling> {
    if samples.is_empty() {
        return domain("Anderson-Darling needs at least one sample");
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::Mismatch("weights and samples differ in length".into()));
        }
        if w.iter().any(|&x| !(x >= 0.0)) {
            return domain("weights must be >= 0");
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    // (F(x), 1 - F(x), w), sorted by x
    let mut pts: Vec<(f64, f64, f64, f64)> = samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let w = weights.map_or(1.0, |w| w[i]);
            (x, normal.cdf(x), normal.cdf(-x), w)
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pts.iter().map(|p| p.3).sum();
    let sum_sq: f64 = pts.iter().map(|p| p.3 * p.3).sum();
    if !(total > 0.0) {
        return domain("weights sum to zero");
    }
    let n_eff = total * total / sum_sq;
    let tiny = f64::MIN_POSITIVE;
    // integral over [a, b] of (c - u)^2 / (u (1 - u)) du, written with the
    // complements ac = 1 - a, bc = 1 - b to keep precision in the upper tail
    let piece = |c: f64, a: f64, ac: f64, b: f64, bc: f64| -> f64 {
        let mut v = -(b - a);
        if c > 0.0 {
            v += c * c * (b.max(tiny) / a.max(tiny)).ln();
        }
        if c < 1.0 {
            v -= (1.0 - c) * (1.0 - c) * (bc.max(tiny) / ac.max(tiny)).ln();
        }
        v
    };
    let mut acc = 0.0;
    let mut c = 0.0;
    let (mut a, mut ac) = (0.0, 1.0);
    for p in &pts {
        acc += piece(c, a, ac, p.1, p.2);
        c += p.3 / total;
        a = p.1;
        ac = p.2;
    }
    acc += piece(1.0, a, ac, 1.0, 0.0);
    let statistic = n_eff * acc;
    Ok(AndersonDarling {
        statistic,
        n_eff,
        critical_value: AD_CRITICAL_1PCT,
        passed: statistic < AD_CRITICAL_1PCT,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AutocorrelationCheck {
    /// `rho_1 .. rho_L`.
    pub rho: Vec<f64>,
    /// `4 / sqrt(N_l)` per lag.
    pub bounds: Vec<f64>,
    pub passed: bool,
}

/// Lag-`1..=max_lag` autocorrelations of zero-mean series stored row-major
/// (`n_rows x horizon`), pooled across rows with optional row weights.
pub fn autocorrelation_check(
    series: &[f64],
    horizon: usize,
    row_weights: Option<&[f64]>,
    max_lag: usize,
) -> Result<AutocorrelationCheck> {
    if horizon == 0 || series.len() % horizon != 0 {
        return Err(Error::Mismatch("series length is not a multiple of the horizon".into()));
    }
    if max_lag >= horizon {
        return domain(format!("max_lag {max_lag} must be < horizon {horizon}"));
    }
    let rows = series.len() / horizon;
    if let Some(w) = row_weights {
        if w.len() != rows {
            return Err(Error::Mismatch("one weight per row is required".into()));
        }
    }
    let w = |i: usize| row_weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..rows).map(w).sum();
    let sum_sq: f64 = (0..rows).map(|i| w(i) * w(i)).sum();
    let n_eff_rows = total * total / sum_sq;
    let mut rho = Vec::with_capacity(max_lag);
    let mut bounds = Vec::with_capacity(max_lag);
    for lag in 1..=max_lag {
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..rows {
            let r = &series[i * horizon..(i + 1) * horizon];
            let wi = w(i);
            for t in 0..horizon - lag {
                xy += wi * r[t] * r[t + lag];
                xx += wi * r[t] * r[t];
                yy += wi * r[t + lag] * r[t + lag];
            }
        }
        rho.push(xy / (xx * yy).sqrt());
        bounds.push(4.0 / (n_eff_rows * (horizon - lag) as f64).sqrt());
    }
    let passed = rho.iter().zip(&bounds).all(|(r, b)| r.abs() < *b);
    Ok(AutocorrelationCheck { rho, bounds, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GarchState;
    use crate::oracle::LatticeSpec;
    use crate::rng::StreamKey;
    use crate::simulate::{simulate, simulate_from, SimOptions};

    #[test]
    fn zero_drift_density_is_one() {
        let spec = GarchSpec::asymmetric(1e-5, vec![0.2], vec![0.7], 0.0, 0.0);
        let p = simulate(&spec, Measure::Physical, 50, 10, StreamKey::new(1, 0)).unwrap();
        let z = girsanov_logrep_density(&p, &spec).unwrap();
        assert!(z.log_abs.iter().all(|&v| v == 0.0));
        let q = transform_innovations(&p, &spec, Representation::LogPrice).unwrap();
        assert_eq!(q.innovations, p.innovations);
    }

    #[test]
    fn constant_volatility_closed_form() {
        let v: f64 = 4e-4;
        let mu = 1e-3;
        let spec = GarchSpec::asymmetric(v, vec![0.0], vec![0.0], 0.0, mu).with_initial_variance(v);
        let p = simulate(&spec, Measure::Physical, 20, 8, StreamKey::new(2, 0)).unwrap();
        let z = girsanov_logrep_density(&p, &spec).unwrap();
        let sigma = v.sqrt();
        for i in 0..20 {
            let sum: f64 = p.innovation_row(i).iter().sum();
            let direct = -(mu / sigma) * sum - 8.0 * mu * mu / (2.0 * v);
            assert!((z.log_abs[i * 9 + 8] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn price_rep_density_special_cases() {
        // mu = -sigma^2 / 2 with constant variance: mu_tilde = 0
        let v = 1e-4;
        let spec = GarchSpec::asymmetric(v, vec![0.0], vec![0.0], 0.0, -0.5 * v).with_initial_variance(v);
        let p = simulate(&spec, Measure::Physical, 10, 5, StreamKey::new(3, 0)).unwrap();
        let z = girsanov_pricerep_density(&p, &spec).unwrap();
        assert!(z.log_abs.iter().all(|&x| x.abs() < 1e-15));

        let duan = GarchSpec::duan_reference();
        let p = simulate(&duan, Measure::Physical, 10, 5, StreamKey::new(3, 1)).unwrap();
        let z = girsanov_pricerep_density(&p, &duan).unwrap();
        let lam = duan.lambda;
        for i in 0..10 {
            let mut acc = 0.0;
            for k in 1..=5 {
                acc += -lam * p.innovation(i, k) - 0.5 * lam * lam;
                assert!((z.log_abs[i * 6 + k] - acc).abs() < 1e-12);
            }
        }
        let q = transform_innovations(&p, &duan, Representation::Price).unwrap();
        for (a, b) in q.innovations.iter().zip(&p.innovations) {
            assert!((a - b - lam).abs() < 1e-12);
        }

        let hn = GarchSpec::heston_nandi(1e-6, vec![1.3e-6], vec![0.6], vec![420.0], 2.0);
        let p = simulate(&hn, Measure::Physical, 10, 5, StreamKey::new(3, 2)).unwrap();
        let q = transform_innovations(&p, &hn, Representation::Price).unwrap();
        for j in 0..p.innovations.len() {
            let shift = 2.5 * p.variances[j].sqrt();
            assert!((q.innovations[j] - p.innovations[j] - shift).abs() < 1e-12);
        }
    }

    #[test]
    fn transformed_recursion_reproduces_physical_variances() {
        // risk-neutral recursion in eps_tilde gives the physical variances path by path
        for spec in [
            GarchSpec::duan_reference(),
            GarchSpec::heston_nandi(1e-6, vec![1.3e-6], vec![0.6], vec![420.0], 2.0),
            GarchSpec::asymmetric(1e-5, vec![0.1], vec![0.8], -0.4, 5e-4),
        ] {
            let p = simulate(&spec, Measure::Physical, 30, 12, StreamKey::new(4, 0)).unwrap();
            let q = transform_innovations(&p, &spec, Representation::Price).unwrap();
            for i in 0..30 {
                let mut window = crate::models::LagWindow {
                    variances: vec![p.variance(i, 1)],
                    innovations: vec![q.innovation(i, 1)],
                };
                for k in 2..=12 {
                    let v = crate::models::step_variance(&spec, &window, Measure::RiskNeutral).unwrap();
                    assert!((v - p.variance(i, k)).abs() <= 1e-12 * v, "{:?}", spec.variant);
                    window.variances[0] = v;
                    window.innovations[0] = q.innovation(i, k);
                }
            }
        }
    }

    #[test]
    fn round_trip_q_to_p_keeps_prices() {
        let spec = GarchSpec::duan_reference();
        let q = simulate(&spec, Measure::RiskNeutral, 40, 10, StreamKey::new(5, 0)).unwrap();
        let p = recover_physical(&q, &spec).unwrap();
        for i in 0..40 {
            let mut st = GarchState::initial(&spec).unwrap();
            for k in 1..=10 {
                st.step(&spec, Measure::Physical, Representation::Price, p.innovation(i, k));
                assert!((st.log_price - q.log_price(i, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anderson_darling_matches_classical_formula() {
        let xs: Vec<f64> = (0..200).map(|i| statrs::distribution::ContinuousCDF::inverse_cdf(&statrs::distribution::Normal::new(0.0, 1.0).unwrap(), (i as f64 + 0.37) / 200.3)).collect();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut u: Vec<f64> = xs.iter().map(|&x| normal.cdf(x)).collect();
        u.sort_by(|a, b| a.total_cmp(b));
        let n = u.len();
        let s: f64 = (0..n)
            .map(|i| (2 * i + 1) as f64 * (u[i].ln() + (1.0 - u[n - 1 - i]).ln()))
            .sum();
        let classical = -(n as f64) - s / n as f64;
        let ad = anderson_darling_normal(&xs, None).unwrap();
        assert!((ad.statistic - classical).abs() < 1e-9, "{} vs {classical}", ad.statistic);
        let ones = vec![2.5; n];
        let adw = anderson_darling_normal(&xs, Some(&ones)).unwrap();
        assert!((adw.statistic - ad.statistic).abs() < 1e-9);
    }

    #[test]
    fn reweighting_restores_normality() {
        // Duan with a large premium: eps_tilde = eps + lambda is N(lambda, 1) under P
        let spec = GarchSpec::duan(1e-5, vec![0.2], vec![0.7], 0.15);
        let p = simulate(&spec, Measure::Physical, 20_000, 3, StreamKey::new(6, 0)).unwrap();
        let q = transform_innovations(&p, &spec, Representation::Price).unwrap();
        let z = girsanov_pricerep_density(&p, &spec).unwrap();
        let last: Vec<f64> = (0..q.n_paths).map(|i| q.innovation(i, 3)).collect();
        let raw = anderson_darling_normal(&last, None).unwrap();
        assert!(!raw.passed, "{raw:?}");
        let w = z.terminal_values();
        let weighted = anderson_darling_normal(&last, Some(&w)).unwrap();
        assert!(weighted.passed, "{weighted:?}");
    }

    #[test]
    fn mmm_existence() {
        let spec = GarchSpec::asymmetric(1.0, vec![0.0], vec![0.0], 0.0, 0.0).with_initial_variance(1.0);
        let p = simulate(&spec, Measure::Physical, 5, 3, StreamKey::new(7, 0)).unwrap();
        let g = mmm_density(&p, &spec, &Innovations::Gaussian).unwrap();
        assert!(!g.exists);
        assert!(g.density.log_abs.iter().all(|&v| v == 0.0));

        let lat = LatticeSpec::rademacher();
        let spec = GarchSpec::asymmetric(1.0, vec![0.0], vec![0.0], 0.0, 0.5).with_initial_variance(1.0);
        let opts = SimOptions {
            innovations: Innovations::Lattice(lat.clone()),
            ..SimOptions::default()
        };
        let start = GarchState::initial(&spec).unwrap();
        let p = simulate_from(&spec, &start, Measure::Physical, 200, 4, StreamKey::new(7, 1), &opts).unwrap();
        let m = mmm_density(&p, &spec, &Innovations::Lattice(lat)).unwrap();
        // K = 1 < 1 * 1 / 0.5
        assert!(m.exists && m.all_factors_positive);
        for i in 0..200 {
            let direct: f64 = p.innovation_row(i).iter().map(|e| 1.0 - 0.5 * e).product();
            assert!((m.density.terminal(i) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn autocorrelation_of_iid_noise_passes() {
        let p = simulate(&GarchSpec::duan_reference(), Measure::RiskNeutral, 5000, 10, StreamKey::new(8, 0)).unwrap();
        let c = autocorrelation_check(&p.innovations, 10, None, 5).unwrap();
        assert!(c.passed, "{c:?}");
        // a deliberately correlated series fails
        let mut s = p.innovations.clone();
        for i in 0..5000 {
            for t in 1..10 {
                s[i * 10 + t] = 0.5 * s[i * 10 + t - 1] + s[i * 10 + t];
            }
        }
        assert!(!autocorrelation_check(&s, 10, None, 5).unwrap().passed);
    }
}
