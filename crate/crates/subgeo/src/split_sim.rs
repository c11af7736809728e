//! Split-chain trajectories, regeneration cycles and Monte-Carlo estimators.
//!
//! Replication `i` of every estimator draws from `substream(seed, i)`, and
//! results are collected in index order before any reduction.

use std::sync::Arc;

use serde::Serialize;

use crate::chain_model::{residual_sample, split_initial, split_step, Initial, Kernel, SmallSetSpec, SplitState};
use crate::rate_kit::SeqSpec;
use crate::rng::{par_replicate, StreamRng};
use crate::{Error, Result};

pub const DEFAULT_CAP: usize = 1_000_000;
const CENSOR_WARN: f64 = 0.01;

/// A split-chain path up to (and including) its first regeneration.
#[derive(Debug, Clone)]
pub struct SplitTrajectory<S> {
    pub states: Vec<SplitState<S>>,
    /// Successive visit times to `C`, starting at time 0.
    pub sigma_js: Vec<usize>,
    /// `N_n = #{j : sigma_j <= n}` for each recorded `n`.
    pub counts: Vec<usize>,
    /// Times with `d_k = 1`.
    pub sigma_checks: Vec<usize>,
    pub censored: bool,
}

impl<S> SplitTrajectory<S> {
    /// `sigma-check`, when the path was not censored.
    pub fn regeneration_time(&self) -> Option<usize> {
        if self.censored {
            None
        } else {
            self.sigma_checks.first().copied()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub reps: usize,
    pub seed: u64,
    pub censored: usize,
    /// More than 1% of cycles hit the cap.
    pub warning: bool,
}

impl MomentEstimate {
    pub fn from_samples(samples: &[f64], censored: usize, seed: u64) -> Self {
        let n = samples.len();
        let mean = if n == 0 { f64::NAN } else { samples.iter().sum::<f64>() / n as f64 };
        let std_error = if n < 2 {
            f64::NAN
        } else {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        let reps = n + censored;
        Self {
            mean,
            std_error,
            reps,
            seed,
            censored,
            warning: reps > 0 && censored as f64 > CENSOR_WARN * reps as f64,
        }
    }

    pub fn upper(&self, k: f64) -> f64 {
        self.mean + k * self.std_error
    }

    pub fn lower(&self, k: f64) -> f64 {
        self.mean - k * self.std_error
    }
}

/// Where a cycle begins.
#[derive(Clone)]
pub enum Start<S> {
    /// Split state with its coin already tossed.
    Split(SplitState<S>),
    /// Draw `X_0` from the law and toss `d_0`.
    Law(Initial<S>),
}

impl<S: Clone> Start<S> {
    pub fn point(x: S) -> Self {
        Start::Law(Initial::Point(x))
    }

    fn draw(&self, ss: &SmallSetSpec<S>, rng: &mut StreamRng) -> SplitState<S> {
        match self {
            Start::Split(s) => s.clone(),
            Start::Law(mu) => split_initial(mu, ss, rng),
        }
    }
}

/// Runs one cycle, calling `visit(k, &X_k, d_k)` for `k = 0, ..., sigma-check`.
/// Returns `(sigma-check, censored)`; a censored cycle stops after index `cap`.
pub fn run_cycle<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    start: &Start<K::State>,
    cap: usize,
    rng: &mut StreamRng,
    mut visit: impl FnMut(usize, &K::State, u8),
) -> (usize, bool) {
    let mut s = start.draw(ss, rng);
    let mut k = 0;
    loop {
        visit(k, &s.x, s.d);
        if s.d == 1 {
            return (k, false);
        }
        if k >= cap {
            return (k, true);
        }
        s = split_step(kernel, ss, &s, rng);
        k += 1;
    }
}

pub fn simulate_until_regeneration<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    start: &Start<K::State>,
    cap: usize,
    rng: &mut StreamRng,
) -> Result<SplitTrajectory<K::State>> {
    if cap < 1 {
        return Err(Error::Argument("cap must be >= 1".into()));
    }
    let mut states = Vec::new();
    let mut sigma_js = Vec::new();
    let mut counts = Vec::new();
    let mut sigma_checks = Vec::new();
    let (_, censored) = run_cycle(kernel, ss, start, cap, rng, |k, x, d| {
        if ss.contains(x) {
            sigma_js.push(k);
        }
        counts.push(sigma_js.len());
        if d == 1 {
            sigma_checks.push(k);
        }
        states.push(SplitState { x: x.clone(), d });
    });
    Ok(SplitTrajectory { states, sigma_js, counts, sigma_checks, censored })
}

/// One regeneration block.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Block {
    pub length: usize,
    pub xi: f64,
    pub censored: bool,
}

/// Consecutive blocks of a single path started from the split of `nu`; block
/// `k` sums `f` over `sigma-check_{k-1}+1, ..., sigma-check_k`.
pub fn excursion_blocks<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    f: &(dyn Fn(&K::State) -> f64 + Sync),
    n_blocks: usize,
    cap: usize,
    rng: &mut StreamRng,
) -> Vec<Block> {
    let start = Start::Law(Initial::Nu);
    (0..n_blocks)
        .map(|_| {
            let mut xi = 0.0;
            let (sigma, censored) = run_cycle(kernel, ss, &start, cap, rng, |_, x, _| xi += f(x));
            Block { length: sigma + 1, xi, censored }
        })
        .collect()
}

/// Cached prefix of a rate sequence for the inner simulation loops.
pub struct SeqCache {
    seq: SeqSpec,
    head: Vec<f64>,
}

impl SeqCache {
    pub fn new(seq: &SeqSpec, len: usize) -> Self {
        Self { seq: seq.clone(), head: seq.table(len.max(1)) }
    }

    #[inline]
    pub fn get(&self, k: usize) -> f64 {
        match self.head.get(k) {
            Some(&r) => r,
            None => self.seq.eval(k as u64),
        }
    }
}

/// Monte-Carlo estimate of `E[sum_{k=0}^{sigma-check} r(k) g(X_k)]`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_modulated_moment<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    seq: &SeqSpec,
    g: &(dyn Fn(&K::State) -> f64 + Sync),
    start: &Start<K::State>,
    reps: usize,
    seed: u64,
    cap: usize,
) -> Result<MomentEstimate>
where
    K::State: 'static,
{
    if reps < 100 {
        return Err(Error::Argument(format!("reps must be >= 100, got {reps}")));
    }
    let cache = SeqCache::new(seq, 1 << 14);
    let out = par_replicate(seed, reps, |_, rng| {
        let mut acc = 0.0;
        let (_, censored) = run_cycle(kernel, ss, start, cap, rng, |k, x, _| acc += cache.get(k) * g(x));
        (acc, censored)
    });
    Ok(collect(out, seed))
}

fn collect(out: Vec<(f64, bool)>, seed: u64) -> MomentEstimate {
    let censored = out.iter().filter(|o| o.1).count();
    let samples: Vec<f64> = out.into_iter().filter(|o| !o.1).map(|o| o.0).collect();
    MomentEstimate::from_samples(&samples, censored, seed)
}

/// Raw per-cycle sums of `g` over `0..=sigma-check` and the cycle length.
pub fn cycle_sums<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    g: &(dyn Fn(&K::State) -> f64 + Sync),
    start: &Start<K::State>,
    reps: usize,
    seed: u64,
    cap: usize,
) -> Vec<(f64, usize, bool)> {
    par_replicate(seed, reps, |_, rng| {
        let mut acc = 0.0;
        let (sigma, censored) = run_cycle(kernel, ss, start, cap, rng, |_, x, _| acc += g(x));
        (acc, sigma, censored)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TailPoint {
    pub m: f64,
    pub p_hat: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailEstimate {
    pub points: Vec<TailPoint>,
    pub reps: usize,
    pub censored: usize,
    pub seed: u64,
}

/// Wilson score interval at the normal quantile `z`.
pub fn wilson(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Empirical `P(sum_{k=0}^{sigma-check} w(X_k) >= M)` on an increasing grid.
/// Censored cycles enter with their partial sum, which can only understate
/// the tail; their number is reported.
#[allow(clippy::too_many_arguments)]
pub fn estimate_tail<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    w: &(dyn Fn(&K::State) -> f64 + Sync),
    m_grid: &[f64],
    start: &Start<K::State>,
    reps: usize,
    seed: u64,
    cap: usize,
) -> Result<TailEstimate> {
    if m_grid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::Argument("M grid must be increasing".into()));
    }
    let sums = cycle_sums(kernel, ss, w, start, reps, seed, cap);
    let censored = sums.iter().filter(|s| s.2).count();
    let mut vals: Vec<f64> = sums.iter().map(|s| s.0).collect();
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    let points = m_grid
        .iter()
        .map(|&m| {
            let hits = n - vals.partition_point(|&v| v < m);
            let p = hits as f64 / n as f64;
            let (lo, hi) = wilson(hits, n, 1.96);
            TailPoint { m, p_hat: p, std_error: (p * (1.0 - p) / n as f64).sqrt(), ci_low: lo, ci_high: hi }
        })
        .collect();
    Ok(TailEstimate { points, reps, censored, seed })
}

/// Monte-Carlo `E[xi_S 1{S < sigma-check}]` with `xi_S = sum_{k<=S} g(X_k)`.
pub fn estimate_fixed_horizon<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    g: &(dyn Fn(&K::State) -> f64 + Sync),
    start: &Start<K::State>,
    horizon: usize,
    reps: usize,
    seed: u64,
) -> MomentEstimate {
    let out = par_replicate(seed, reps, |_, rng| {
        let mut s = start.draw(ss, rng);
        let mut xi = g(&s.x);
        let mut alive = s.d == 0;
        for _ in 0..horizon {
            if !alive {
                break;
            }
            s = split_step(kernel, ss, &s, rng);
            xi += g(&s.x);
            alive = s.d == 0;
        }
        (if alive { xi } else { 0.0 }, false)
    });
    collect(out, seed)
}

/// Monte-Carlo `W_{r,g}(x) = E_x[sum_{k=1}^{tau} r(k) g(X_k)]` under the
/// residual dynamics, `tau` the first return to `C` at a time `>= 1`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_q_return_moment<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    seq: &SeqSpec,
    g: &(dyn Fn(&K::State) -> f64 + Sync),
    x: &K::State,
    reps: usize,
    seed: u64,
    cap: usize,
) -> MomentEstimate {
    let cache = SeqCache::new(seq, 1 << 14);
    let out = par_replicate(seed, reps, |_, rng| {
        let mut y = x.clone();
        let mut acc = 0.0;
        for k in 1..=cap {
            y = residual_sample(kernel, ss, &y, rng);
            acc += cache.get(k) * g(&y);
            if ss.contains(&y) {
                return (acc, false);
            }
        }
        (acc, true)
    });
    collect(out, seed)
}

/// Shared `Fn(&S) -> f64` helper.
pub type Observable<S> = Arc<dyn Fn(&S) -> f64 + Send + Sync>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain_model::{FiniteChain, FiniteKernel};
    use crate::rate_kit::RateSpec;
    use crate::rng::substream;

    fn three_state(eps: f64) -> FiniteChain {
        let p = vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.1, 0.5], vec![0.6, 0.2, 0.2]];
        FiniteChain::new(
            FiniteKernel::from_dense(&p).unwrap(),
            &[0],
            eps,
            &[1.0, 0.0, 0.0],
            vec![1.0, 24.0, 20.0],
            RateSpec::polynomial(0.6).unwrap(),
            18.2,
        )
        .unwrap()
    }

    #[test]
    fn trajectory_bookkeeping() {
        let ch = three_state(0.2);
        let mut rng = substream(3, 0);
        for _ in 0..200 {
            let t = simulate_until_regeneration(&ch.kernel, &ch.small_set, &Start::point(2), 10_000, &mut rng).unwrap();
            assert!(!t.censored);
            assert!(t.sigma_js.windows(2).all(|w| w[0] < w[1]));
            for (n, &cnt) in t.counts.iter().enumerate() {
                assert_eq!(cnt, t.sigma_js.iter().filter(|&&s| s <= n).count());
            }
            for s in &t.states {
                assert!(s.d == 0 || ch.in_c(s.x));
            }
            assert_eq!(t.regeneration_time(), Some(t.states.len() - 1));
        }
    }

    #[test]
    fn censoring_is_flagged() {
        let ch = three_state(0.2);
        let mut rng = substream(4, 0);
        let t = simulate_until_regeneration(&ch.kernel, &ch.small_set, &Start::point(1), 1, &mut rng);
        let t = t.unwrap();
        assert!(t.censored || t.regeneration_time().is_some());
        assert!(simulate_until_regeneration(&ch.kernel, &ch.small_set, &Start::point(1), 0, &mut rng).is_err());
    }

    #[test]
    fn sure_head_gives_zero_regeneration_time() {
        let p = vec![vec![0.2, 0.5, 0.3]; 3];
        let k = FiniteKernel::from_dense(&p).unwrap();
        let ss = crate::chain_model::SmallSetSpec::finite(&k, &[0, 1, 2], 1.0, &[0.2, 0.5, 0.3]).unwrap();
        let mut rng = substream(5, 0);
        let t = simulate_until_regeneration(&k, &ss, &Start::point(1), 10, &mut rng).unwrap();
        assert_eq!(t.regeneration_time(), Some(0));
    }

    #[test]
    fn blocks_count_lengths() {
        let ch = three_state(0.2);
        let mut rng = substream(6, 0);
        let b = excursion_blocks(&ch.kernel, &ch.small_set, &|_| 1.0, 500, DEFAULT_CAP, &mut rng);
        assert!(b.iter().all(|b| b.xi == b.length as f64));
        let z = excursion_blocks(&ch.kernel, &ch.small_set, &|_| 0.0, 50, DEFAULT_CAP, &mut rng);
        assert!(z.iter().all(|b| b.xi == 0.0));
    }

    #[test]
    fn wilson_is_ordered() {
        let (lo, hi) = wilson(0, 100, 1.96);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
        let (lo, hi) = wilson(50, 100, 1.96);
        assert!(lo < 0.5 && hi > 0.5);
    }
}
