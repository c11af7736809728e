use proptest::prelude::*;
use rand::Rng;

use subgeo::bound_engine::verify_drift;
use subgeo::chain_model::Initial;
use subgeo::limit_lab::{berry_esseen_gate, clt_gate, decompose_path, mdp_rate};
use subgeo::model_zoo::build;
use subgeo::oracle::{exact_stationary, key_relation};
use subgeo::rate_kit::{check_g_membership, default_grid, PsiSpec, RateSpec};
use subgeo::rng::{par_replicate, substream, with_workers};
use subgeo::split_sim::{estimate_tail, Start};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn polynomial_rate_matches_closed_form(c in 0.05f64..2.0, alpha in 0.05f64..0.95, u in 0.0f64..1e4) {
        let rate = RateSpec::polynomial_scaled(c, alpha).unwrap();
        let closed = (1.0 + c * (1.0 - alpha) * u).powf(alpha / (1.0 - alpha));
        let got = rate.rate(u).unwrap();
        prop_assert!((got - closed).abs() <= 1e-8 * closed, "{got} vs {closed}");
    }

    #[test]
    fn phi_inverse_round_trips(alpha in 0.05f64..0.95, lv in 0.0f64..40.0) {
        let rate = RateSpec::polynomial(alpha).unwrap();
        let v = lv.exp();
        let back = rate.big_phi_inverse(rate.big_phi(v).unwrap()).unwrap();
        prop_assert!((back - v).abs() <= 1e-9 * v);
    }

    #[test]
    fn mdp_rate_is_the_quadratic_legendre_transform(sigma2 in 0.01f64..10.0, x in -5.0f64..5.0) {
        let j = mdp_rate(sigma2, x).unwrap();
        let grid_sup = (0..=40_000)
            .map(|i| -20.0 + 1e-3 * f64::from(i) / sigma2.min(1.0))
            .map(|l| l * x - 0.5 * l * l * sigma2)
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(j >= grid_sup - 1e-12);
        prop_assert!(j - grid_sup <= 1e-5 * (1.0 + j));
    }

    #[test]
    fn power_envelopes_belong_to_g_exactly_up_to_alpha(alpha in 0.05f64..0.95, beta in 0.0f64..1.0) {
        let rate = RateSpec::polynomial(alpha).unwrap();
        let rep = check_g_membership(&rate, &PsiSpec::power(beta).unwrap(), &default_grid()).unwrap();
        prop_assert_eq!(rep.member, beta <= alpha);
        if beta < alpha - 1e-6 {
            prop_assert!(rep.violations.is_empty());
        }
    }

    #[test]
    fn berry_esseen_gate_implies_clt_gate(alpha in 0.05f64..0.95, beta in 0.0f64..0.95) {
        let rate = RateSpec::polynomial(alpha).unwrap();
        let psi = PsiSpec::power(beta.min(alpha)).unwrap();
        if berry_esseen_gate(&rate, &psi).unwrap().pass {
            prop_assert!(clt_gate(&rate, &psi).unwrap().pass);
        }
    }

    #[test]
    fn two_state_chains_satisfy_drift_and_stationary_law(p in 0.02f64..0.98, q in 0.02f64..1.0) {
        let e = build(&format!("two-state({p},{q})")).unwrap();
        let ch = e.finite().unwrap();
        prop_assert!(verify_drift(ch).holds);
        let pi = exact_stationary(ch).unwrap();
        prop_assert!((pi[0] - q / (p + q)).abs() < 1e-12);
        prop_assert!((pi[1] - p / (p + q)).abs() < 1e-12);
    }

    #[test]
    fn key_relation_holds_for_random_data(g in proptest::collection::vec(-3.0f64..3.0, 3), w in proptest::collection::vec(0.01f64..1.0, 3), s in 0usize..6) {
        let ch = build("three-state-default").unwrap().finite().unwrap().clone();
        let t: f64 = w.iter().sum();
        let mu: Vec<f64> = w.iter().map(|x| x / t).collect();
        let k = key_relation(&ch, &mu, &g, s).unwrap();
        prop_assert!((k.lhs - k.rhs).abs() <= 1e-12 * (1.0 + k.lhs.abs()));
    }

    #[test]
    fn decomposition_sums_to_path_sum(seed in any::<u64>(), n in 1usize..400, f in proptest::collection::vec(-2.0f64..2.0, 3), x0 in 0usize..3) {
        let ch = build("three-state-default").unwrap().finite().unwrap().clone();
        let mut rng = substream(seed, 0);
        let d = decompose_path(&ch.kernel, &ch.small_set, &Initial::Point(x0), &|x: &usize| f[*x], n, 0.08, &mut rng);
        prop_assert!((d.sum() - d.s_n).abs() <= 1e-9 * n as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tail_estimate_is_non_increasing(seed in any::<u64>(), x0 in 0usize..3) {
        let ch = build("three-state-default").unwrap().finite().unwrap().clone();
        let grid: Vec<f64> = (1..=30).map(f64::from).collect();
        let t = estimate_tail(&ch.kernel, &ch.small_set, &|x: &usize| (*x + 1) as f64, &grid, &Start::point(x0), 2000, seed, 1_000_000).unwrap();
        for w in t.points.windows(2) {
            prop_assert!(w[1].p_hat <= w[0].p_hat);
        }
        prop_assert!(t.points.iter().all(|p| p.ci_low <= p.p_hat && p.p_hat <= p.ci_high));
    }

    #[test]
    fn replication_is_independent_of_worker_count(seed in any::<u64>(), reps in 1usize..300) {
        let run = |w| with_workers(w, || par_replicate(seed, reps, |i, rng| (i, rng.gen::<u64>())));
        let one = run(1);
        prop_assert_eq!(&one, &run(4));
        prop_assert!(one.iter().enumerate().all(|(i, r)| r.0 == i));
        let direct: Vec<u64> = (0..reps).map(|i| substream(seed, i as u64).gen()).collect();
        prop_assert_eq!(one.iter().map(|r| r.1).collect::<Vec<_>>(), direct);
    }
}

#[test]
fn every_catalogue_entry_satisfies_its_drift() {
    for info in subgeo::model_zoo::list() {
        let e = build(&info.name).unwrap();
        if let Some(ch) = e.finite() {
            assert!(verify_drift(ch).holds, "{}", info.name);
        }
    }
}
