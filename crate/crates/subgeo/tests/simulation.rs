//! Split-chain simulation against exact oracles.

use subgeo::bound_engine::theorem1_constants;
use subgeo::chain_model::{split_initial, split_step, FiniteChain, Initial};
use subgeo::limit_lab::{berry_esseen_empirical, mdp_empirical, mdp_rate, sigma2_exact, sigma2_from_blocks, SpeedSpec};
use subgeo::model_zoo::build;
use subgeo::oracle::{exact_hitting_moment, exact_split_moment, exact_split_moment_at, Dynamics, HitFrom};
use subgeo::rate_kit::{PsiSpec, SeqSpec};
use subgeo::rng::{par_replicate, substream};
use subgeo::split_sim::{estimate_modulated_moment, estimate_q_return_moment, excursion_blocks, simulate_until_regeneration, Start};

const CAP: usize = 10_000_000;

fn chain(name: &str) -> FiniteChain {
    build(name).unwrap().finite().unwrap().clone()
}

fn linear() -> SeqSpec {
    SeqSpec::linear()
}

#[test]
fn split_step_marginal_is_p_row_within_dkw_band() {
    let ch = chain("three-state-default");
    let n = 1_000_000;
    let draws = par_replicate(5, n, |_, rng| {
        let s = split_initial(&Initial::Point(0), &ch.small_set, rng);
        split_step(&ch.kernel, &ch.small_set, &s, rng).x
    });
    let mut counts = [0usize; 3];
    draws.iter().for_each(|&x| counts[x] += 1);
    let p = [0.2, 0.5, 0.3];
    let band = ((2.0f64 / 1e-3).ln() / (2.0 * n as f64)).sqrt();
    let (mut fe, mut fp, mut worst) = (0.0, 0.0, 0.0f64);
    for i in 0..3 {
        fe += counts[i] as f64 / n as f64;
        fp += p[i];
        worst = worst.max((fe - fp).abs());
    }
    assert!(worst <= band, "DKW distance {worst} above {band}");
}

#[test]
fn house_of_cards_descent_forces_long_cycles() {
    let ch = chain("house-of-cards");
    let mut rng = substream(3, 0);
    for _ in 0..2000 {
        let t = simulate_until_regeneration(&ch.kernel, &ch.small_set, &Start::point(5), CAP, &mut rng).unwrap();
        assert!(t.regeneration_time().unwrap() >= 5);
    }
}

#[test]
fn regeneration_time_mean_matches_oracle() {
    let ch = chain("three-state-default");
    let ones = vec![1.0; 3];
    for x in 0..3 {
        let exact = exact_split_moment_at(&ch, &SeqSpec::constant(), &ones, x).unwrap().value;
        let mc = estimate_modulated_moment(&ch.kernel, &ch.small_set, &SeqSpec::constant(), &|_| 1.0, &Start::point(x), 100_000, 20 + x as u64, CAP).unwrap();
        let z = (mc.mean - exact) / mc.std_error;
        assert!(z.abs() <= 3.0, "x={x}: E[sigma+1] exact {exact}, mc {} (z {z})", mc.mean);
    }
}

#[test]
fn block_sums_of_an_indicator_match_oracle() {
    let ch = chain("three-state-default");
    let g = [0.0, 0.0, 1.0];
    let exact = exact_split_moment(&ch, &SeqSpec::constant(), &g, ch.nu()).unwrap().value;
    let mut rng = substream(8, 0);
    let blocks = excursion_blocks(&ch.kernel, &ch.small_set, &|x: &usize| g[*x], 100_000, CAP, &mut rng);
    let xs: Vec<f64> = blocks.iter().map(|b| b.xi).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
    let z = (mean - exact) / (sd / (xs.len() as f64).sqrt());
    assert!(z.abs() <= 3.0, "mean xi {mean} vs {exact} (z {z})");
    // f == 1 counts block lengths.
    let mut rng = substream(8, 1);
    for b in excursion_blocks(&ch.kernel, &ch.small_set, &|_: &usize| 1.0, 500, CAP, &mut rng) {
        assert_eq!(b.xi, b.length as f64);
    }
}

#[test]
fn linear_rate_moment_matches_oracle() {
    let ch = chain("three-state-default");
    let ones = vec![1.0; 3];
    for x in 0..3 {
        let exact = exact_split_moment_at(&ch, &linear(), &ones, x).unwrap();
        let mc = estimate_modulated_moment(&ch.kernel, &ch.small_set, &linear(), &|_| 1.0, &Start::point(x), 100_000, 30 + x as u64, CAP).unwrap();
        let z = (mc.mean - exact.value) / mc.std_error;
        assert!(z.abs() <= 3.0, "x={x}: z {z}");
    }
}

#[test]
fn hitting_moment_matches_long_simulation() {
    let ch = chain("three-state-default");
    let ones = vec![1.0; 3];
    for x in 0..3 {
        let exact = exact_hitting_moment(&ch, Dynamics::Q, &linear(), &ones, x, HitFrom::One).unwrap();
        let mc = estimate_q_return_moment(&ch.kernel, &ch.small_set, &linear(), &|_| 1.0, &x, 10_000_000, 40 + x as u64, CAP);
        let z = (mc.mean - exact.value) / mc.std_error;
        assert!(z.abs() <= 3.0, "x={x}: W exact {} mc {} z {z}", exact.value, mc.mean);
    }
}

#[test]
fn house_of_cards_rate_moment_below_certificate() {
    let e = build("house-of-cards").unwrap();
    let ch = e.finite().unwrap();
    let t = theorem1_constants(&e.summary(), &PsiSpec::power(0.3).unwrap(), 0.5).unwrap();
    let seq = SeqSpec::from_rate(&t.rate);
    for x in [0usize, 3, 10] {
        let mc = estimate_modulated_moment(&ch.kernel, &ch.small_set, &seq, &|_| 1.0, &Start::point(x), 100_000, 50 + x as u64, CAP).unwrap();
        let bound = t.r_moment_bound(ch.v()[x], ch.in_c(x));
        assert!(mc.mean <= bound, "x={x}: mc {} above bound {bound}", mc.mean);
        assert_eq!(mc.censored, 0);
    }
}

#[test]
fn doubly_stochastic_variance_matches_batch_means() {
    let ch = chain("doubly-stochastic");
    let f = [1.0, -1.0, 0.0];
    let exact = sigma2_exact(&ch, &f, 1e-13).unwrap().sigma2;
    let (steps, batches) = (1_000_000usize, 100usize);
    let len = steps / batches;
    let mut rng = substream(77, 0);
    let mut x = 0usize;
    let mut means = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut s = 0.0;
        for _ in 0..len {
            s += f[x];
            x = ch.p_row(x).sample(&mut rng);
        }
        means.push(s / len as f64);
    }
    let m = means.iter().sum::<f64>() / batches as f64;
    let vals: Vec<f64> = means.iter().map(|b| len as f64 * (b - m).powi(2)).collect();
    let est = vals.iter().sum::<f64>() / (batches - 1) as f64;
    let se = est * (2.0 / (batches - 1) as f64).sqrt();
    assert!((est - exact).abs() <= 3.0 * se, "batch means {est} vs exact {exact} (se {se})");
}

#[test]
fn iid_bernoulli_distance_within_twice_classical_bound() {
    let p = 0.3f64;
    let e = build(&format!("iid({},{})", 1.0 - p, p)).unwrap();
    let ch = e.finite().unwrap();
    let f = [0.0, 1.0];
    let sigma = (p * (1.0 - p)).sqrt();
    let rho = p * (1.0 - p) * ((1.0 - p).powi(2) + p * p);
    let grid = [64usize, 256, 1024];
    let r = berry_esseen_empirical(&ch.kernel, &0, &|x: &usize| f[*x], p, sigma, &grid, 20_000, 50, 12).unwrap();
    for pt in &r.points {
        let classical = 0.4748 * rho / (sigma.powi(3) * (pt.n as f64).sqrt());
        assert!(pt.distance <= 2.0 * classical, "n={}: distance {} vs 2 x {classical}", pt.n, pt.distance);
    }
}

#[test]
fn three_state_mdp_log_probability_near_rate() {
    let ch = chain("three-state-default");
    let ind: Vec<f64> = (0..3).map(|i| f64::from(u8::from(ch.in_c(i)))).collect();
    let ex = sigma2_exact(&ch, &ind, 1e-13).unwrap();
    let x = ex.sigma2.sqrt();
    let j = mdp_rate(ex.sigma2, x).unwrap();
    let speed = SpeedSpec::power_log(0.5, 0.25);
    let f = |s: &usize| ind[*s] - ex.pi_f;
    let pts = mdp_empirical(&ch.kernel, &ch.small_set, &Initial::Point(0), &f, &speed, &[2000, 16000], x, ex.sigma2, ch.epsilon() * ex.pi_f, 4000, 71)
        .unwrap();
    let last = pts.last().unwrap();
    assert!((last.normalized + j).abs() <= 0.5, "normalised {} vs -J {}", last.normalized, -j);
    for p in &pts {
        assert!((p.mean_i_n - p.e_n as f64).abs() <= 3.0 * p.se_i_n + 1.0, "i(n) mean {} vs e(n) {}", p.mean_i_n, p.e_n);
        assert!(p.max_identity_error <= 1e-9 * p.n as f64);
    }
}

#[test]
fn blocks_refuse_and_accept() {
    let blocks: Vec<(f64, f64)> = (0..200).map(|i| (f64::from(i % 3) - 1.0, 1.0 + f64::from(i % 2))).collect();
    let r = sigma2_from_blocks(&blocks).unwrap();
    assert!(r.sigma2 > 0.0 && r.std_error.unwrap() > 0.0);
}
