//! Exact ground truth on finite and truncated chains.
//!
//! Moments with time-dependent weights `r(k)` are evaluated as horizon-truncated
//! sums of substochastic kernel powers. The remainder after horizon `h` is
//! certified by `K_sub r(h) ||g||_inf m_h sum_{i>=1} r(i) q^{floor(i/p)}`,
//! where `m_h` is the surviving mass and `q = ||K^p||_inf < 1`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chain_model::{FiniteChain, SparseRow, SplitState};
use crate::rate_kit::{submultiplicativity_constant, SeqSpec};
use crate::split_sim::SeqCache;
use crate::{Error, Result};

const DEFAULT_TOL: f64 = 1e-10;
const MAX_HORIZON: usize = 5_000_000;

/// A value together with a certified truncation remainder.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Exact {
    pub value: f64,
    /// Upper bound on the neglected tail; the true value lies in
    /// `[value, value + remainder]` for non-negative `g`.
    pub remainder: f64,
    pub horizon: usize,
}

impl Exact {
    pub fn upper(&self) -> f64 {
        self.value + self.remainder
    }
}

/// Which return time closes the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitFrom {
    /// `tau`: first visit to `C` at a time `>= 1`, sum over `k = 1..=tau`.
    One,
    /// `sigma`: first visit at a time `>= 0`, sum over `k = 0..=sigma`.
    Zero,
}

/// Which one-step dynamics drive the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    P,
    Q,
}

fn rows_of(chain: &FiniteChain, dynamics: Dynamics) -> &[SparseRow] {
    match dynamics {
        Dynamics::P => chain.kernel.rows(),
        Dynamics::Q => chain.q_rows(),
    }
}

fn sup_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `(p, q)` with `q = ||K^p||_inf < 1` for `K(y, z) = w(y) rows[y][z]`.
fn decay(rows: &[SparseRow], w: &[f64]) -> Result<(usize, f64)> {
    let n = rows.len();
    let max_p = 4 * n + 64;
    let mut u: Vec<f64> = vec![1.0; n];
    let mut next = vec![0.0; n];
    for p in 1..=max_p {
        for y in 0..n {
            next[y] = if w[y] == 0.0 { 0.0 } else { w[y] * rows[y].dot(&u) };
        }
        std::mem::swap(&mut u, &mut next);
        let q = sup_norm(&u);
        if q <= 0.5 {
            return Ok((p, q));
        }
        if p == max_p && q < 1.0 - 1e-12 {
            return Ok((p, q));
        }
    }
    Err(Error::Refused("substochastic kernel does not decay; chain may be reducible".into()))
}

/// `sum_{i>=1} r(i) q^{floor(i/p)}`.
fn tail_factor(cache: &SeqCache, p: usize, q: f64) -> Result<f64> {
    let mut s = 0.0;
    let mut block = 0usize;
    let mut qm = 1.0;
    loop {
        let lo = (block * p).max(1);
        let hi = (block + 1) * p;
        let part: f64 = (lo..hi).map(|i| cache.get(i)).sum();
        s += qm * part;
        if q == 0.0 {
            return Ok(s);
        }
        qm *= q;
        block += 1;
        if qm * p as f64 * cache.get((block + 1) * p) <= 1e-16 * s {
            return Ok(s);
        }
        if block > 1_000_000 || !s.is_finite() {
            return Err(Error::Refused("remainder series for the rate does not converge".into()));
        }
    }
}

/// `sum_{k >= k0} r(k) (a_k . g)` with `a_{k+1} = (a_k * w) rows`.
#[allow(clippy::too_many_arguments)]
fn weighted_series(
    rows: &[SparseRow],
    w: &[f64],
    seq: &SeqSpec,
    k_sub: f64,
    g: &[f64],
    mut a: Vec<f64>,
    k0: usize,
    tol: f64,
) -> Result<Exact> {
    let n = rows.len();
    let cache = SeqCache::new(seq, 1 << 16);
    let (p, q) = decay(rows, w)?;
    let s = tail_factor(&cache, p, q)?;
    let gmax = sup_norm(g);
    let mut value = 0.0;
    let mut next = vec![0.0; n];
    let mut k = k0;
    loop {
        let rk = cache.get(k);
        value += rk * a.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
        for (y, x) in a.iter_mut().enumerate() {
            *x *= w[y];
        }
        let mass: f64 = a.iter().sum();
        let remainder = if mass == 0.0 { 0.0 } else { k_sub * rk * gmax * mass * s };
        if remainder <= tol * value.abs().max(1.0) {
            return Ok(Exact { value, remainder, horizon: k });
        }
        if k - k0 >= MAX_HORIZON {
            return Err(Error::Refused(format!("remainder {remainder:e} still above tolerance at horizon {k}")));
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        for (y, &x) in a.iter().enumerate() {
            if x != 0.0 {
                for (z, pr) in rows[y].iter() {
                    next[z] += x * pr;
                }
            }
        }
        std::mem::swap(&mut a, &mut next);
        k += 1;
    }
}

fn default_k_sub(seq: &SeqSpec) -> Result<f64> {
    if seq.is_constant() {
        return Ok(1.0);
    }
    submultiplicativity_constant(seq, 256)
}

fn delta(n: usize, x: usize) -> Vec<f64> {
    let mut a = vec![0.0; n];
    a[x] = 1.0;
    a
}

/// `E_x[sum_{k=k0}^{T} r(k) g(X_k)]` for the return time selected by `from`.
pub fn exact_hitting_moment(
    chain: &FiniteChain,
    dynamics: Dynamics,
    seq: &SeqSpec,
    g: &[f64],
    x: usize,
    from: HitFrom,
) -> Result<Exact> {
    let n = chain.n();
    check_vec(g, n, "g")?;
    let rows = rows_of(chain, dynamics);
    let alive: Vec<f64> = (0..n).map(|i| if chain.in_c(i) { 0.0 } else { 1.0 }).collect();
    let k_sub = default_k_sub(seq)?;
    match from {
        HitFrom::Zero if chain.in_c(x) => Ok(Exact { value: seq.eval(0) * g[x], remainder: 0.0, horizon: 0 }),
        HitFrom::Zero => weighted_series(rows, &alive, seq, k_sub, g, delta(n, x), 0, DEFAULT_TOL),
        HitFrom::One => {
            let a1 = rows[x].to_dense(n);
            weighted_series(rows, &alive, seq, k_sub, g, a1, 1, DEFAULT_TOL)
        }
    }
}

/// `W_{r,g}(x)` under the residual dynamics.
pub fn exact_w(chain: &FiniteChain, seq: &SeqSpec, g: &[f64], x: usize) -> Result<Exact> {
    exact_hitting_moment(chain, Dynamics::Q, seq, g, x, HitFrom::One)
}

/// Split-chain moment `E_{delta-check x}[sum_{k=0}^{sigma-check} r(k) g(X_k)]`
/// from the killed recursion `a_{k+1} = (a_k (1 - eps 1_C)) Q`.
pub fn exact_split_moment(chain: &FiniteChain, seq: &SeqSpec, g: &[f64], init: &[f64]) -> Result<Exact> {
    let n = chain.n();
    check_vec(g, n, "g")?;
    check_vec(init, n, "initial law")?;
    let eps = chain.epsilon();
    let w: Vec<f64> = (0..n).map(|i| if chain.in_c(i) { 1.0 - eps } else { 1.0 }).collect();
    let k_sub = default_k_sub(seq)?;
    weighted_series(chain.q_rows(), &w, seq, k_sub, g, init.to_vec(), 0, DEFAULT_TOL)
}

pub fn exact_split_moment_at(chain: &FiniteChain, seq: &SeqSpec, g: &[f64], x: usize) -> Result<Exact> {
    exact_split_moment(chain, seq, g, &delta(chain.n(), x))
}

/// The return-time series `eps sum_j (1-eps)^j E~[xi_{sigma_j}]`.
#[derive(Debug, Clone, Serialize)]
pub struct ReturnSeries {
    /// `E~_mu[xi_{sigma_j}]` for `j = 0..=j_max`.
    pub terms: Vec<f64>,
    pub partial: f64,
    /// Killed-recursion value minus `partial`, plus its own remainder.
    pub remainder: f64,
    pub value: Exact,
}

/// Evaluates the series over `(state, visit count, time)` under `Q` up to
/// `j_max` visits. The time horizon is the one certified for the killed
/// recursion, extended until the mass with at most `j_max` visits is below
/// `1e-15`.
pub fn return_time_series(chain: &FiniteChain, seq: &SeqSpec, g: &[f64], init: &[f64], j_max: usize) -> Result<ReturnSeries> {
    let n = chain.n();
    let value = exact_split_moment(chain, seq, g, init)?;
    let eps = chain.epsilon();
    let cache = SeqCache::new(seq, 1 << 16);
    // a[j][y]: Q-mass at time k with j visits to C strictly before k.
    let mut a = vec![vec![0.0; n]; j_max + 1];
    a[0] = init.to_vec();
    let mut c = vec![0.0; j_max + 1];
    let rows = chain.q_rows();
    let mut k = 0usize;
    loop {
        let rk = cache.get(k);
        for j in 0..=j_max {
            c[j] += rk * a[j].iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
        }
        let mut next = vec![vec![0.0; n]; j_max + 1];
        for j in 0..=j_max {
            for y in 0..n {
                let x = a[j][y];
                if x == 0.0 {
                    continue;
                }
                let jj = j + usize::from(chain.in_c(y));
                if jj > j_max {
                    continue;
                }
                for (z, pr) in rows[y].iter() {
                    next[jj][z] += x * pr;
                }
            }
        }
        a = next;
        k += 1;
        let live: f64 = a.iter().flatten().sum();
        if (k > value.horizon && live * rk.max(1.0) < 1e-15) || k > MAX_HORIZON {
            break;
        }
    }
    let mut terms = Vec::with_capacity(j_max + 1);
    let mut acc = 0.0;
    let mut partial = 0.0;
    let mut weight = eps;
    for cj in &c {
        acc += cj;
        terms.push(acc);
        partial += weight * acc;
        weight *= 1.0 - eps;
    }
    if eps == 1.0 {
        partial = terms[0];
    }
    Ok(ReturnSeries { terms, partial, remainder: (value.value - partial).max(0.0) + value.remainder, value })
}

fn check_vec(v: &[f64], n: usize, name: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Argument(format!("{name} has length {} != {n}", v.len())));
    }
    Ok(())
}

// ---------------------------------------------------------------- stationarity

/// Irreducibility and aperiodicity of the transition graph.
pub fn check_ergodic(chain: &FiniteChain) -> Result<()> {
    let n = chain.n();
    let rows = chain.kernel.rows();
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(y) = queue.pop_front() {
        for (z, _) in rows[y].iter() {
            if level[z] == usize::MAX {
                level[z] = level[y] + 1;
                queue.push_back(z);
            }
        }
    }
    if let Some(i) = level.iter().position(|&l| l == usize::MAX) {
        return Err(Error::Validation(format!("state {i} is not reachable from 0")));
    }
    let mut back = vec![Vec::new(); n];
    for (y, row) in rows.iter().enumerate() {
        for (z, _) in row.iter() {
            back[z].push(y);
        }
    }
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut queue = VecDeque::from([0usize]);
    while let Some(z) = queue.pop_front() {
        for &y in &back[z] {
            if !seen[y] {
                seen[y] = true;
                queue.push_back(y);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Validation(format!("state 0 is not reachable from {i}")));
    }
    let mut period = 0usize;
    for (y, row) in rows.iter().enumerate() {
        for (z, _) in row.iter() {
            let d = (level[y] + 1).abs_diff(level[z]);
            period = gcd(period, d);
        }
    }
    if period != 1 {
        return Err(Error::Validation(format!("chain is periodic with period {period}")));
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `pi` with `pi P = pi`, from a dense LU solve with one refinement step.
pub fn exact_stationary(chain: &FiniteChain) -> Result<Vec<f64>> {
    check_ergodic(chain)?;
    let n = chain.n();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for (y, row) in chain.kernel.rows().iter().enumerate() {
        for (z, p) in row.iter() {
            a[(z, y)] += p;
        }
    }
    for i in 0..n {
        a[(i, i)] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut pi = lu.solve(&b).ok_or_else(|| Error::Validation("singular stationary system".into()))?;
    let r = &b - &a * &pi;
    if let Some(d) = lu.solve(&r) {
        pi += d;
    }
    let mut pi: Vec<f64> = pi.iter().map(|x| x.max(0.0)).collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= s);
    let resid = stationary_residual(chain, &pi);
    if resid > 1e-12 {
        return Err(Error::Validation(format!("stationary residual {resid:e} above 1e-12")));
    }
    Ok(pi)
}

/// `max_j |(pi P)_j - pi_j|`.
pub fn stationary_residual(chain: &FiniteChain, pi: &[f64]) -> f64 {
    let mut out = vec![0.0; chain.n()];
    for (y, row) in chain.kernel.rows().iter().enumerate() {
        for (z, p) in row.iter() {
            out[z] += pi[y] * p;
        }
    }
    out.iter().zip(pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- enumeration

const MAX_PATHS: f64 = 2e8;

/// Visits every split path `(x_0, d_0, ..., x_S, d_S)` of positive
/// probability with its probability. Returns the number of paths.
pub fn enumerate_paths(
    chain: &FiniteChain,
    mu: &[f64],
    horizon: usize,
    visit: &mut dyn FnMut(&[SplitState<usize>], f64),
) -> Result<usize> {
    let n = chain.n();
    if n > 6 || horizon > 12 {
        return Err(Error::Refused(format!("enumeration limited to 6 states and horizon 12, got {n} and {horizon}")));
    }
    let branching = (n + chain.c().len()) as f64;
    if branching.powi(horizon as i32 + 1) > MAX_PATHS {
        return Err(Error::Refused(format!("about {:.1e} paths exceeds the enumeration budget", branching.powi(horizon as i32 + 1))));
    }
    check_vec(mu, n, "mu")?;
    let eps = chain.epsilon();
    let mut path = Vec::with_capacity(horizon + 1);
    let mut count = 0usize;
    for (x0, &m) in mu.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for d in coins(chain, x0, eps) {
            path.push(SplitState { x: x0, d: d.0 });
            dfs(chain, horizon, &mut path, m * d.1, visit, &mut count);
            path.pop();
        }
    }
    Ok(count)
}

fn coins(chain: &FiniteChain, x: usize, eps: f64) -> Vec<(u8, f64)> {
    if !chain.in_c(x) {
        vec![(0, 1.0)]
    } else if eps == 1.0 {
        vec![(1, 1.0)]
    } else {
        vec![(0, 1.0 - eps), (1, eps)]
    }
}

fn dfs(
    chain: &FiniteChain,
    horizon: usize,
    path: &mut Vec<SplitState<usize>>,
    w: f64,
    visit: &mut dyn FnMut(&[SplitState<usize>], f64),
    count: &mut usize,
) {
    if path.len() == horizon + 1 {
        *count += 1;
        visit(path, w);
        return;
    }
    let last = *path.last().expect("non-empty path");
    let eps = chain.epsilon();
    let nu_row;
    let row = if last.d == 1 {
        nu_row = SparseRow::from_dense(chain.nu());
        &nu_row
    } else {
        chain.q_row(last.x)
    };
    for (z, p) in row.iter() {
        for d in coins(chain, z, eps) {
            path.push(SplitState { x: z, d: d.0 });
            dfs(chain, horizon, path, w * p * d.1, visit, count);
            path.pop();
        }
    }
}

/// Both sides of `E-check_mu-check[xi_S 1{S < sigma-check}] =
/// E~_mu[xi_S (1-eps)^{N_S}]` with `xi_S = sum_{k<=S} g(X_k)`, the left side
/// from split-path enumeration and the right side from residual-chain paths.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KeyRelation {
    pub lhs: f64,
    pub rhs: f64,
    /// Total probability of all enumerated split paths.
    pub total_mass: f64,
    pub paths: usize,
}

pub fn key_relation(chain: &FiniteChain, mu: &[f64], g: &[f64], horizon: usize) -> Result<KeyRelation> {
    check_vec(g, chain.n(), "g")?;
    let mut lhs = 0.0;
    let mut total = 0.0;
    let paths = enumerate_paths(chain, mu, horizon, &mut |path, w| {
        total += w;
        if path.iter().all(|s| s.d == 0) {
            lhs += w * path.iter().map(|s| g[s.x]).sum::<f64>();
        }
    })?;
    let eps = chain.epsilon();
    let mut rhs = 0.0;
    for (x0, &m) in mu.iter().enumerate() {
        if m > 0.0 {
            rhs += q_dfs(chain, g, horizon, x0, m, g[x0], i32::from(chain.in_c(x0)), eps);
        }
    }
    Ok(KeyRelation { lhs, rhs, total_mass: total, paths })
}

#[allow(clippy::too_many_arguments)]
fn q_dfs(chain: &FiniteChain, g: &[f64], left: usize, x: usize, w: f64, xi: f64, visits: i32, eps: f64) -> f64 {
    if left == 0 {
        return w * xi * (1.0 - eps).powi(visits);
    }
    chain
        .q_row(x)
        .iter()
        .map(|(z, p)| q_dfs(chain, g, left - 1, z, w * p, xi + g[z], visits + i32::from(chain.in_c(z)), eps))
        .sum()
}
