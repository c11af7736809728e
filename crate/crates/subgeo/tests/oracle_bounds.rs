//! Deterministic cross-checks between the exact oracles and the bound engine.

use std::sync::Arc;

use subgeo::bound_engine::{
    corollary_constants, lemma_psi_drift, prop2_bound, psi_drift_margins, theorem1_constants, verify_drift, CorollaryCase, DriftSummary, Prop2Inputs,
};
use subgeo::chain_model::{FiniteChain, FiniteKernel};
use subgeo::limit_lab::clt_gate;
use subgeo::model_zoo::build;
use subgeo::oracle::{exact_split_moment_at, exact_w, key_relation};
use subgeo::rate_kit::{PsiSpec, RateSpec, SeqSpec};

fn chain(name: &str) -> FiniteChain {
    build(name).unwrap().finite().unwrap().clone()
}

/// `r(k) - r(k-1)`, so that a modulated sum of it telescopes to `r(sigma-check)`.
fn increments(seq: &SeqSpec) -> SeqSpec {
    let s = seq.clone();
    SeqSpec::custom("increments", Arc::new(move |k| if k == 0 { s.eval(0) } else { s.eval(k) - s.eval(k - 1) }), false)
}

#[test]
fn drift_margins_match_hand_arithmetic() {
    let p = vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.1, 0.5], vec![0.6, 0.2, 0.2]];
    let v = vec![1.0, 2.0, 3.0];
    let rate = RateSpec::polynomial_scaled(0.1, 0.6).unwrap();
    let ch = FiniteChain::new(FiniteKernel::from_dense(&p).unwrap(), &[0], 0.2, &[1.0, 0.0, 0.0], v.clone(), rate.clone(), 2.0).unwrap();
    let rep = verify_drift(&ch);
    for (i, row) in p.iter().enumerate() {
        let pv: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        let expect = v[i] - pv - 0.1 * v[i].powf(0.6) + if i == 0 { 2.0 } else { 0.0 };
        assert!((rep.margins[i].1 - expect).abs() < 1e-14);
    }
    assert_eq!(rep.holds, rep.margins.iter().all(|m| m.1 >= 0.0));
}

#[test]
fn house_of_cards_drift_and_psi_drift_hold_pointwise() {
    let e = build("house-of-cards").unwrap();
    let ch = e.finite().unwrap();
    assert!(verify_drift(ch).holds);
    let psi = PsiSpec::power(0.3).unwrap();
    let cert = lemma_psi_drift(&e.summary(), &psi).unwrap();
    let b_psi = cert.require("b_psi").unwrap();
    assert!(b_psi.is_finite());
    let m = psi_drift_margins(ch, &psi, b_psi).unwrap();
    assert_eq!(m.len(), 1001);
    assert!(m.iter().all(|&x| x >= -1e-9), "min margin {}", m.iter().copied().fold(f64::INFINITY, f64::min));
}

#[test]
fn three_state_psi_drift_margins_non_negative() {
    let e = build("three-state-default").unwrap();
    let ch = e.finite().unwrap();
    for beta in [0.0, 0.3, 0.6] {
        let psi = PsiSpec::power(beta).unwrap();
        let b = lemma_psi_drift(&e.summary(), &psi).unwrap().require("b_psi").unwrap();
        let m = psi_drift_margins(ch, &psi, b).unwrap();
        assert!(m.iter().all(|&x| x >= -1e-12), "beta {beta}: {m:?}");
    }
}

#[test]
fn certified_sup_c_w_dominates_exact_values() {
    for name in ["house-of-cards", "three-state-default"] {
        let e = build(name).unwrap();
        let ch = e.finite().unwrap();
        let t = theorem1_constants(&e.summary(), &PsiSpec::power(0.3).unwrap(), 0.5).unwrap();
        let seq = SeqSpec::from_rate(&t.rate);
        let cert = t.cert.require("sup_C W_{r,1}").unwrap();
        let ones = vec![1.0; ch.n()];
        for &c in ch.c() {
            let w = exact_w(ch, &seq, &ones, c).unwrap().upper();
            assert!(w <= cert, "{name} c={c}: W {w} above {cert}");
        }
    }
}

#[test]
fn split_moment_below_modulated_and_unmodulated_bounds() {
    for name in ["three-state-default", "two-state(0.3,0.4)", "doubly-stochastic"] {
        let ch = chain(name);
        let n = ch.n();
        let g = ch.v().to_vec();
        let seq = SeqSpec::linear();
        let ones = vec![1.0; n];
        let w: Vec<f64> = (0..n).map(|x| exact_w(&ch, &seq, &g, x).unwrap().upper()).collect();
        let sup_c_w = ch.c().iter().map(|&c| w[c]).fold(0.0, f64::max);
        let w1: Vec<f64> = (0..n).map(|x| exact_w(&ch, &SeqSpec::constant(), &g, x).unwrap().upper()).collect();
        let sup_c_w1 = ch.c().iter().map(|&c| w1[c]).fold(0.0, f64::max);
        let b_g = corollary_constants(ch.epsilon(), CorollaryCase::G, sup_c_w1, subgeo::bound_engine::Grade::Exact).unwrap().require("b_g").unwrap();
        for x in 0..n {
            let exact = exact_split_moment_at(&ch, &seq, &g, x).unwrap().value;
            let e_r = exact_split_moment_at(&ch, &increments(&seq), &ones, x).unwrap().upper();
            let bound = prop2_bound(&Prop2Inputs {
                r0: seq.eval(0),
                g_x: g[x],
                w_x: w[x],
                x_in_c: ch.in_c(x),
                sup_c_w,
                epsilon: ch.epsilon(),
                k_sub: 1.0,
                e_r_sigma: e_r,
            })
            .unwrap();
            assert!(exact <= bound, "{name} x={x}: {exact} > {bound}");
            let plain = exact_split_moment_at(&ch, &SeqSpec::constant(), &g, x).unwrap().value;
            let cor = g[x] + if ch.in_c(x) { 0.0 } else { w1[x] } + b_g;
            assert!(plain <= cor, "{name} x={x}: {plain} > {cor}");
        }
    }
}

#[test]
fn excursion_bounds_dominate_exact_moments_for_several_envelopes() {
    let e = build("three-state-default").unwrap();
    let ch = e.finite().unwrap();
    for (beta, delta) in [(0.0, 0.25), (0.3, 0.5), (0.6, 2.0)] {
        let psi = PsiSpec::power(beta).unwrap();
        let t = theorem1_constants(&e.summary(), &psi, delta).unwrap();
        let g: Vec<f64> = ch.v().iter().map(|&v| psi.eval(v)).collect();
        let seq = SeqSpec::from_rate(&t.rate);
        for x in 0..3 {
            let (v, inc) = (ch.v()[x], ch.in_c(x));
            assert!(exact_split_moment_at(ch, &SeqSpec::constant(), &g, x).unwrap().upper() <= t.psi_moment_bound(v, inc).unwrap());
            assert!(exact_split_moment_at(ch, &seq, &[1.0; 3], x).unwrap().upper() <= t.r_moment_bound(v, inc));
        }
    }
}

#[test]
fn key_relation_base_case_and_short_horizons() {
    let ch = chain("three-state-default");
    let g = [1.0, 2.0, 5.0];
    let mu = [0.5, 0.25, 0.25];
    let k0 = key_relation(&ch, &mu, &g, 0).unwrap();
    let base: f64 = (0..3).map(|x| mu[x] * g[x] * if ch.in_c(x) { 1.0 - ch.epsilon() } else { 1.0 }).sum();
    assert!((k0.lhs - base).abs() < 1e-15 && (k0.rhs - base).abs() < 1e-15);
    for s in 1..=3 {
        let k = key_relation(&ch, &mu, &g, s).unwrap();
        assert!((k.lhs - k.rhs).abs() <= 1e-12 * k.lhs.abs().max(1.0));
    }
}

#[test]
fn house_of_cards_clt_window_is_beta_up_to_one_tenth() {
    let e = build("house-of-cards").unwrap();
    let rate = e.summary().rate;
    assert!(clt_gate(&rate, &PsiSpec::power(0.1).unwrap()).unwrap().pass);
    assert!(!clt_gate(&rate, &PsiSpec::power(0.11).unwrap()).unwrap().pass);
}

#[test]
fn theorem1_constants_finite_across_delta() {
    let e = build("three-state-default").unwrap();
    let s: DriftSummary = e.summary();
    for d in [0.25, 0.5, 1.0, 4.0] {
        let t = theorem1_constants(&s, &PsiSpec::constant(), d).unwrap();
        assert!(t.cert.constants.values().all(|v| v.is_finite()));
    }
}
