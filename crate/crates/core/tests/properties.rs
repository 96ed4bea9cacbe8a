use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use regulated_market::model::{ellipticity_constant, entropy, market_weights, rank_permutation, CovarianceMatrix};
use regulated_market::portfolios::{
    cumulative_excess_growth, excess_growth_rate, portfolio_weights, shares_from_portfolio, wealth_from_portfolio,
    wealth_from_shares, wealth_from_shares_excluding_jumps, portfolio_shares,
};
use regulated_market::premodels::{gbm_coefficients, largest_index, logpole_drift};
use regulated_market::regulation::{
    entropy_jump_lower_bound, prerule_apply, regulate_caps, rule_apply, sampling,
};
use regulated_market::simulation::{reconstruct_net_capitalization, simulate_regulated};
use regulated_market::{
    BrownianStream, CapitalizationVector, GbmModel, GbmParams, LogPoleParams, PortfolioRule, RegulatorySet, SimConfig,
    WeightVector,
};

fn caps_strategy() -> impl Strategy<Value = Vec<f64>> {
    (3usize..=10).prop_flat_map(|n| prop::collection::vec(1e-3f64..1e3, n))
}

fn set_strategy() -> impl Strategy<Value = (usize, f64)> {
    (3usize..=10).prop_flat_map(|n| {
        let upper = (n - 1) as f64 / (n + 1) as f64;
        (Just(n), (1e-3 * upper)..(upper * (1.0 - 1e-3)))
    })
}

fn rule_strategy(n: usize) -> impl Strategy<Value = PortfolioRule> {
    prop_oneof![
        Just(PortfolioRule::Market),
        Just(PortfolioRule::Equal),
        Just(PortfolioRule::Entropy),
        (0.0f64..=1.0).prop_map(|p| PortfolioRule::Diversity { p }),
        prop::collection::vec(-1.0f64..2.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum::<f64>();
            let shift = (1.0 - s) / w.len() as f64;
            PortfolioRule::Constant { weights: w.iter().map(|v| v + shift).collect() }
        }),
    ]
}

proptest! {
    #[test]
    fn weights_are_conic_invariant(x in caps_strategy(), k in -20i32..20, lambda in 1e-6f64..1e6) {
        let x = CapitalizationVector::new(x).unwrap();
        let mu = market_weights(&x);
        let pow2 = market_weights(&x.scaled(2f64.powi(k)).unwrap());
        prop_assert_eq!(&mu, &pow2);
        let scaled = market_weights(&x.scaled(lambda).unwrap());
        for (a, b) in mu.as_slice().iter().zip(scaled.as_slice()) {
            prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a);
        }
    }

    #[test]
    fn rank_permutation_sorts(x in caps_strategy()) {
        let p = rank_permutation(&x).unwrap();
        let mut seen = p.as_slice().to_vec();
        seen.sort();
        prop_assert_eq!(seen, (0..x.len()).collect::<Vec<_>>());
        let sorted = p.apply(&x);
        prop_assert!(sorted.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn entropy_is_bounded_by_log_n(x in caps_strategy()) {
        let mu = market_weights(&CapitalizationVector::new(x).unwrap());
        let h = entropy(&mu);
        prop_assert!(h > 0.0);
        prop_assert!(h <= (mu.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn full_rank_volatility_has_positive_ellipticity(entries in prop::collection::vec(-1.0f64..1.0, 16)) {
        let sigma = DMatrix::from_row_slice(4, 4, &entries) + DMatrix::identity(4, 4) * 5.0;
        let eps = ellipticity_constant(&CovarianceMatrix::from_volatility(&sigma)).unwrap();
        prop_assert!(eps > 0.0);
    }

    #[test]
    fn logpole_drift_repels_the_largest(x in prop::collection::vec(0.5f64..1.5, 3), t in 0.0f64..0.95) {
        let params = LogPoleParams {
            delta: 0.3,
            g: vec![0.1; 3],
            c: 0.3,
            volatility: DMatrix::identity(3, 3) * 0.2,
        };
        // push company 0 to the top along a ray and check the drift keeps falling
        let base = CapitalizationVector::new(x).unwrap();
        let top = |s: f64| {
            let mut v = base.as_slice().to_vec();
            let others: f64 = v[1] + v[2];
            let target = 0.5 + s * (0.7 - 1e-9 - 0.5);
            v[0] = target / (1.0 - target) * others;
            CapitalizationVector::new(v).unwrap()
        };
        let lo = top(t);
        let hi = top(t + 0.04);
        prop_assert_eq!(largest_index(&lo), 0);
        let b_lo = logpole_drift(&params, &lo).unwrap();
        let b_hi = logpole_drift(&params, &hi).unwrap();
        prop_assert!(b_lo.iter().chain(&b_hi).all(|b| b.is_finite()));
        prop_assert!(b_hi[0] < b_lo[0]);
    }

    #[test]
    fn largest_index_is_unique_and_first(x in caps_strategy()) {
        let x = CapitalizationVector::new(x).unwrap();
        let i = largest_index(&x);
        let v = x.as_slice();
        prop_assert!(v.iter().all(|w| *w <= v[i]));
        prop_assert!(v[..i].iter().all(|w| *w < v[i]));
    }

    #[test]
    fn gbm_coefficients_are_state_free(x in caps_strategy()) {
        let n = x.len();
        let params = GbmParams { drift: vec![0.05; n], volatility: DMatrix::identity(n, n) * 0.2 };
        let a = gbm_coefficients(&params, &CapitalizationVector::new(x).unwrap());
        let b = gbm_coefficients(&params, &CapitalizationVector::new(vec![1.0; n]).unwrap());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rule_moves_boundary_states_inside((n, dp) in set_strategy(), seed in any::<u64>()) {
        let set = RegulatorySet::new(n, dp).unwrap();
        let mu = sampling::boundary_weights(&mut ChaCha8Rng::seed_from_u64(seed), n, dp);
        let after = rule_apply(&mu, &set).unwrap();
        prop_assert!(set.contains(&after));
        let jump = entropy(&after) - entropy(&mu);
        prop_assert!(jump >= entropy_jump_lower_bound(n, dp).unwrap() - 1e-12);
        prop_assert!((after.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rule_is_identity_inside((n, dp) in set_strategy(), x in prop::collection::vec(1.0f64..2.0, 10)) {
        let set = RegulatorySet::new(n, dp).unwrap();
        let mu = WeightVector::normalized(x[..n].to_vec()).unwrap();
        prop_assume!(set.contains(&mu));
        prop_assert_eq!(&rule_apply(&mu, &set).unwrap(), &mu);
        prop_assert_eq!(&prerule_apply(&mu, &set).unwrap(), &mu);
    }

    #[test]
    fn regulation_conserves_capital_and_commutes_with_scaling(
        (n, dp) in set_strategy(),
        x in prop::collection::vec(1e-2f64..1e2, 10),
        big in 0usize..10,
        lambda in 1e-4f64..1e4,
    ) {
        let set = RegulatorySet::new(n, dp).unwrap();
        let mut v = x[..n].to_vec();
        v[big % n] *= 1e3;
        let x = CapitalizationVector::new(v).unwrap();
        let r = regulate_caps(&x, &set).unwrap();
        assert_relative_eq!(r.total(), x.total(), max_relative = 1e-12);
        prop_assert!(set.contains_caps(&r));
        let scaled = regulate_caps(&x.scaled(lambda).unwrap(), &set).unwrap();
        for (a, b) in scaled.as_slice().iter().zip(r.as_slice()) {
            assert_relative_eq!(*a, lambda * b, max_relative = 1e-12);
        }
    }

    #[test]
    fn portfolio_outputs_sum_to_one(x in prop::collection::vec(1e-2f64..1e2, 5), rule in rule_strategy(5)) {
        let mu = market_weights(&CapitalizationVector::new(x.clone()).unwrap());
        let pi = portfolio_weights(&rule, &mu).unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(pi.iter().all(|p| p.abs() <= rule.bound() + 1e-12));
        if rule.is_long_only() {
            prop_assert!(pi.iter().all(|p| *p >= 0.0));
        }
        let v = 123.0;
        let h = shares_from_portfolio(&pi, v, &CapitalizationVector::new(x.clone()).unwrap());
        let value: f64 = h.iter().zip(&x).map(|(h, x)| h * x).sum();
        assert_relative_eq!(value, v, max_relative = 1e-12, epsilon = 1e-10);
    }

    #[test]
    fn excess_growth_respects_the_diversity_floor(x in prop::collection::vec(1e-2f64..1e2, 4), dp in 0.05f64..0.55) {
        let mu = market_weights(&CapitalizationVector::new(x).unwrap());
        let a = CovarianceMatrix::from_volatility(&DMatrix::from_row_slice(4, 4, &[
            0.3, 0.05, 0.0, 0.0,
            0.0, 0.25, 0.05, 0.0,
            0.0, 0.0, 0.2, 0.05,
            0.05, 0.0, 0.0, 0.22,
        ]));
        let eps = ellipticity_constant(&a).unwrap();
        let gamma = excess_growth_rate(&mu, &a);
        prop_assert!(gamma >= -1e-15);
        if mu.largest() <= 1.0 - dp {
            prop_assert!(gamma >= eps * dp / 2.0 - 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn regulated_paths_keep_their_invariants(seed in any::<u64>(), path in 0u64..1000, rule in rule_strategy(3)) {
        let model = GbmModel::new(GbmParams { drift: vec![0.05; 3], volatility: DMatrix::identity(3, 3) * 0.3 }).unwrap();
        let set = RegulatorySet::new(3, 0.4).unwrap();
        let y0 = CapitalizationVector::new(vec![58.0, 22.0, 20.0]).unwrap();
        let cfg = SimConfig::new(0.5, 1.0 / 252.0, seed).unwrap();
        let p = simulate_regulated(&model, &set, &y0, &cfg, &mut BrownianStream::new(seed, path, 3)).unwrap();

        for y in p.states() {
            prop_assert!(set.contains_caps(y));
        }
        for k in 0..p.step_count() {
            if p.event_at(k + 1).is_none() {
                let dy: Vec<f64> = p.states()[k + 1].as_slice().iter().zip(p.states()[k].as_slice()).map(|(a, b)| a - b).collect();
                prop_assert_eq!(&dy, &p.net_increments()[k]);
            }
        }
        let rebuilt = reconstruct_net_capitalization(&p);
        for (a, b) in rebuilt.iter().zip(p.net_states()) {
            for (u, v) in a.iter().zip(b) {
                prop_assert!((u - v).abs() <= 1e-9 * v.abs().max(1.0));
            }
        }

        let wealth = wealth_from_portfolio(&p, &rule, 1.0);
        if rule.is_long_only() {
            prop_assert!(wealth.unwrap().values.iter().all(|v| *v > 0.0));
        }
        if let Ok(shares) = portfolio_shares(&p, &rule, 1.0) {
            let a = wealth_from_shares(&p, &shares, 1.0).unwrap();
            let b = wealth_from_shares_excluding_jumps(&p, &shares, 1.0).unwrap();
            prop_assert!(a.values.iter().zip(&b.values).all(|(u, v)| u.to_bits() == v.to_bits()));
        }

        let eps = ellipticity_constant(&CovarianceMatrix::from_volatility(&model.params().volatility)).unwrap();
        let cumulative = cumulative_excess_growth(&p, &model);
        prop_assert!(cumulative.windows(2).all(|w| w[1] >= w[0]));
        for (g, t) in cumulative.iter().zip(p.times()) {
            prop_assert!(*g >= eps * 0.4 / 2.0 * t - 1e-12);
        }
    }
}
