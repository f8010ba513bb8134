use proptest::prelude::*;

use garch_lrm::hedging::{bs_call, lrm_physical_tree, strategy_processes, Payoff, Strategy as HedgeStrategy};
use garch_lrm::measure::{girsanov_logrep_density, girsanov_pricerep_density, recover_physical};
use garch_lrm::models::{check_moment_condition, theoretical_kurtosis};
use garch_lrm::oracle::{lrm_tree, mean_square_hedging_error, Asset, Dynamics};
use garch_lrm::simulate::ems_adjust;
use garch_lrm::{
    simulate, GarchSpec, LatticeSpec, Measure, Representation, StreamKey, Tree, TreeSpec, Variant,
};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

/// Stationary GARCH(1,1) specs of every variant with daily-scale variance.
fn spec_strategy() -> impl Strategy<Value = GarchSpec> {
    (
        0..3u8,
        1e-6..1e-4f64,
        0.02..0.3f64,
        0.3..0.65f64,
        -0.5..0.5f64,
        -0.05..0.05f64,
    )
        .prop_map(|(variant, omega, alpha, beta, gamma, drift)| match variant {
            0 => GarchSpec::asymmetric(omega, vec![alpha], vec![beta], gamma, drift * 1e-2),
            1 => GarchSpec::duan(omega, vec![alpha], vec![beta], drift),
            // Heston-Nandi alpha lives on the sigma^4 scale
            _ => GarchSpec::heston_nandi(omega, vec![alpha * 1e-5], vec![beta], vec![gamma * 100.0], drift),
        })
}

fn payoff_strategy() -> impl Strategy<Value = Payoff> {
    (0..3u8, 90.0..110.0f64).prop_map(|(kind, strike)| match kind {
        0 => Payoff::call(strike),
        1 => Payoff::put(strike),
        _ => Payoff::custom(move |s: f64| (s - strike).abs().min(5.0)),
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn variance_never_below_omega(spec in spec_strategy(), seed in any::<u64>()) {
        for measure in [Measure::Physical, Measure::RiskNeutral] {
            let p = simulate(&spec, measure, 16, 30, StreamKey::new(seed, 0)).unwrap();
            for v in &p.variances {
                prop_assert!(*v >= spec.omega, "{v} < {}", spec.omega);
            }
        }
    }

    #[test]
    fn kurtosis_at_least_normal(var in 0.0..1e-6f64, mean in 1e-6..1e-3f64) {
        let k = theoretical_kurtosis(var, mean).unwrap();
        prop_assert!(k >= 3.0);
        prop_assert_eq!(k == 3.0, var == 0.0 || 3.0 * var / (mean * mean) < f64::EPSILON * 3.0);
    }

    #[test]
    fn first_moment_radius_is_persistence(
        omega in 1e-6..1e-4f64, alpha in 0.0..0.3f64, beta in 0.0..0.7f64, gamma in -1.0..1.0f64,
    ) {
        let spec = GarchSpec::asymmetric(omega, vec![alpha], vec![beta], gamma, 0.0);
        let rho = check_moment_condition(&spec, 1).unwrap().spectral_radius;
        prop_assert!((rho - (alpha * (1.0 + gamma * gamma) + beta)).abs() <= 1e-12);
    }

    #[test]
    fn measure_round_trip_keeps_prices(spec in spec_strategy(), seed in any::<u64>(), price_rep in any::<bool>()) {
        let rep = if price_rep { Representation::Price } else { Representation::LogPrice };
        let q = garch_lrm::simulate::simulate_from(
            &spec,
            &garch_lrm::GarchState::initial(&spec).unwrap(),
            Measure::RiskNeutral,
            8,
            12,
            StreamKey::new(seed, 1),
            &garch_lrm::simulate::SimOptions { representation: rep, ..Default::default() },
        )
        .unwrap();
        let p = recover_physical(&q, &spec).unwrap();
        // replay the physical recursion from the recovered innovations
        for i in 0..p.n_paths {
            let mut state = garch_lrm::GarchState::initial(&spec).unwrap();
            for t in 1..=p.horizon {
                let step = state.step(&spec, Measure::Physical, rep, p.innovation(i, t));
                prop_assert!((step.variance - p.variance(i, t)).abs() <= 1e-12 * step.variance);
                prop_assert!((state.log_price - p.log_price(i, t)).abs() <= 1e-12 * p.log_price(i, t).abs());
            }
        }
    }

    #[test]
    fn ems_exact_and_idempotent(spec in spec_strategy(), seed in any::<u64>()) {
        let q = simulate(&spec, Measure::RiskNeutral, 32, 8, StreamKey::new(seed, 2)).unwrap();
        let once = ems_adjust(&q).unwrap();
        for t in 0..=8 {
            prop_assert!((once.mean_price(t) - spec.s0).abs() <= 1e-10 * spec.s0);
        }
        let twice = ems_adjust(&once).unwrap();
        for (a, b) in once.log_prices.iter().zip(&twice.log_prices) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn driftless_density_is_one(
        omega in 1e-6..1e-4f64, alpha in 0.02..0.3f64, beta in 0.3..0.65f64, gamma in -0.5..0.5f64,
        seed in any::<u64>(),
    ) {
        let spec = GarchSpec::asymmetric(omega, vec![alpha], vec![beta], gamma, 0.0);
        let p = simulate(&spec, Measure::Physical, 8, 10, StreamKey::new(seed, 3)).unwrap();
        let z = girsanov_logrep_density(&p, &spec).unwrap();
        prop_assert!(z.terminal_values().iter().all(|&v| v == 1.0));
        // the price representation still carries the sigma^2 / 2 convexity drift
        let zp = girsanov_pricerep_density(&p, &spec).unwrap();
        prop_assert!(zp.all_positive());
    }

    #[test]
    fn lattice_mass_is_one(spec in spec_strategy(), depth in 1..6usize, three in any::<bool>()) {
        let lattice = if three { LatticeSpec::three_point() } else { LatticeSpec::rademacher() };
        let tree = Tree::build(&spec, &TreeSpec::lattice(&lattice, depth, Dynamics::Physical).unwrap()).unwrap();
        for n in 0..=depth {
            prop_assert!((tree.total_mass(n) - 1.0).abs() <= 1e-14);
        }
    }

    #[test]
    fn lrm_cost_is_orthogonal_martingale(spec in spec_strategy(), payoff in payoff_strategy(), three in any::<bool>()) {
        let lattice = if three { LatticeSpec::three_point() } else { LatticeSpec::rademacher() };
        let tree = Tree::build(&spec, &TreeSpec::lattice(&lattice, 4, Dynamics::Physical).unwrap()).unwrap();
        for asset in [Asset::Price, Asset::LogPrice] {
            let h: Vec<f64> = tree.leaves().log_price.iter().map(|&s| payoff.eval_log(s)).collect();
            let r = lrm_tree(&tree, &h, asset).cost_residuals(&tree);
            let scale = h.iter().fold(1.0f64, |a, b| a.max(b.abs()));
            prop_assert!(r.martingale <= 1e-12 * scale && r.orthogonality <= 1e-12 * scale, "{r:?}");
        }
        if spec.variant != Variant::HestonNandi {
            let product = lrm_physical_tree(&tree, &spec, &payoff).unwrap();
            let r = product.cost_residuals(&tree);
            prop_assert!(r.martingale <= 1e-10 && r.orthogonality <= 1e-10, "{r:?}");
        }
    }

    #[test]
    fn lrm_is_variance_optimal(
        spec in spec_strategy(), payoff in payoff_strategy(), shifts in prop::collection::vec(-0.5..0.5f64, 41), dv in -1.0..1.0f64,
    ) {
        let tree = Tree::build(
            &spec,
            &TreeSpec::lattice(&LatticeSpec::three_point(), 3, Dynamics::LatticeMartingale).unwrap(),
        )
        .unwrap();
        let h: Vec<f64> = tree.leaves().log_price.iter().map(|&s| payoff.eval_log(s)).collect();
        let lrm = lrm_tree(&tree, &h, Asset::Price);
        let v0 = lrm.values[0][0];
        let best = mean_square_hedging_error(&tree, &h, v0, &lrm.xi, Asset::Price);
        let mut it = shifts.iter().cycle();
        let xi: Vec<Vec<f64>> = lrm.xi.iter().map(|l| l.iter().map(|x| x + it.next().unwrap()).collect()).collect();
        let other = mean_square_hedging_error(&tree, &h, v0 + dv, &xi, Asset::Price);
        prop_assert!(other >= best * (1.0 - 1e-12));
    }

    #[test]
    fn self_financing_cost_is_constant(
        path in prop::collection::vec(50.0..150.0f64, 2..12), v0 in -10.0..10.0f64, seed in any::<u64>(),
    ) {
        let mut rng = StreamKey::new(seed, 4).path_rng(0);
        let xi: Vec<f64> = (1..path.len()).map(|_| rng.normal()).collect();
        let s = HedgeStrategy::self_financing(Asset::Price, path.clone(), v0, xi).unwrap();
        let proc = strategy_processes(&s, &path).unwrap();
        for c in &proc.cost {
            prop_assert!((c - v0).abs() <= 1e-9);
        }
        // value splits into riskless and risky holdings
        for k in 1..path.len() {
            prop_assert!((s.values[k] - (s.xi0[k] + s.xi[k - 1] * path[k])).abs() <= 1e-9);
        }
    }

    #[test]
    fn bs_call_bounds(s in 1.0..200.0f64, k in 1.0..200.0f64, v in 0.0..0.5f64) {
        let (price, delta) = bs_call(s, k, v);
        prop_assert!(price >= (s - k).max(0.0) - 1e-9);
        prop_assert!(price <= s + 1e-9);
        prop_assert!((0.0..=1.0).contains(&delta));
    }
}
