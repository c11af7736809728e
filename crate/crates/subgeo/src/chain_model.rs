//! Kernels, small-set data, the residual kernel `Q` and the split-chain step.
//!
//! The split chain is simulated coin-after-state: a [`SplitState`] holds
//! `(X_n, d_n)` with `d_n ~ Bernoulli(eps 1_C(X_n))` already drawn, and
//! [`split_step`] moves to `X_{n+1} ~ nu` when `d_n = 1` and to
//! `X_{n+1} ~ Q(X_n, .)` otherwise, then tosses `d_{n+1}`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rate_kit::{RateConfig, RateSpec};
use crate::rng::StreamRng;
use crate::{Error, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StateSpace {
    Finite(usize),
    Countable,
    RealLine,
}

pub trait Kernel: Send + Sync {
    type State: Clone + Send + Sync + fmt::Debug + PartialEq;

    fn sample(&self, x: &Self::State, rng: &mut StreamRng) -> Self::State;

    fn space(&self) -> StateSpace;

    fn in_space(&self, _x: &Self::State) -> bool {
        true
    }
}

// ---------------------------------------------------------------- sparse rows

/// A probability row stored sparsely with a cumulative table for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    idx: Vec<usize>,
    prob: Vec<f64>,
    cum: Vec<f64>,
}

impl SparseRow {
    pub fn from_pairs(mut pairs: Vec<(usize, f64)>) -> Self {
        pairs.retain(|&(_, p)| p > 0.0);
        pairs.sort_by_key(|&(j, _)| j);
        let mut cum = Vec::with_capacity(pairs.len());
        let mut acc = 0.0;
        for &(_, p) in &pairs {
            acc += p;
            cum.push(acc);
        }
        Self { idx: pairs.iter().map(|p| p.0).collect(), prob: pairs.iter().map(|p| p.1).collect(), cum }
    }

    pub fn from_dense(row: &[f64]) -> Self {
        Self::from_pairs(row.iter().copied().enumerate().collect())
    }

    pub fn dirac(j: usize) -> Self {
        Self::from_pairs(vec![(j, 1.0)])
    }

    pub fn total(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.idx.iter().copied().zip(self.prob.iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn get(&self, j: usize) -> f64 {
        match self.idx.binary_search(&j) {
            Ok(k) => self.prob[k],
            Err(_) => 0.0,
        }
    }

    pub fn dot(&self, f: &[f64]) -> f64 {
        self.iter().map(|(j, p)| p * f[j]).sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (j, p) in self.iter() {
            out[j] = p;
        }
        out
    }

    pub fn sample(&self, rng: &mut StreamRng) -> usize {
        let u = rng.gen::<f64>() * self.total();
        let k = self.cum.partition_point(|&c| c <= u);
        self.idx[k.min(self.idx.len() - 1)]
    }
}

/// A finite (or truncated countable) kernel given by sparse rows.
#[derive(Debug, Clone)]
pub struct FiniteKernel {
    rows: Arc<Vec<SparseRow>>,
    space: StateSpace,
}

impl FiniteKernel {
    pub fn new(rows: Vec<SparseRow>, space: StateSpace) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Validation("empty transition matrix".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if let Some(&j) = r.idx.last() {
                if j >= n {
                    return Err(Error::Validation(format!("row {i} points to state {j} >= {n}")));
                }
            }
            if (r.total() - 1.0).abs() > ROW_TOL {
                return Err(Error::Validation(format!("row {i} sums to {}", r.total())));
            }
        }
        Ok(Self { rows: Arc::new(rows), space })
    }

    pub fn from_dense(p: &[Vec<f64>]) -> Result<Self> {
        let n = p.len();
        for (i, row) in p.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Validation(format!("row {i} has length {} != {n}", row.len())));
            }
            if let Some(&x) = row.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::Validation(format!("row {i} has invalid entry {x}")));
            }
        }
        Self::new(p.iter().map(|r| SparseRow::from_dense(r)).collect(), StateSpace::Finite(n))
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &SparseRow {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        self.rows.iter().map(|r| r.to_dense(n)).collect()
    }

    /// `(P f)(i)` for every state.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(f)).collect()
    }
}

impl Kernel for FiniteKernel {
    type State = usize;

    fn sample(&self, x: &usize, rng: &mut StreamRng) -> usize {
        self.rows[*x].sample(rng)
    }

    fn space(&self) -> StateSpace {
        self.space
    }

    fn in_space(&self, x: &usize) -> bool {
        *x < self.n()
    }
}

/// A kernel on the real line driven by a user sampler.
#[derive(Clone)]
pub struct RealKernel {
    sampler: Arc<dyn Fn(f64, &mut StreamRng) -> f64 + Send + Sync>,
    lower: f64,
}

impl fmt::Debug for RealKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RealKernel(lower={})", self.lower)
    }
}

impl RealKernel {
    pub fn new(lower: f64, sampler: Arc<dyn Fn(f64, &mut StreamRng) -> f64 + Send + Sync>) -> Self {
        Self { sampler, lower }
    }
}

impl Kernel for RealKernel {
    type State = f64;

    fn sample(&self, x: &f64, rng: &mut StreamRng) -> f64 {
        (self.sampler)(*x, rng)
    }

    fn space(&self) -> StateSpace {
        StateSpace::RealLine
    }

    fn in_space(&self, x: &f64) -> bool {
        x.is_finite() && *x >= self.lower
    }
}

// ---------------------------------------------------------------- small set

pub type Pred<S> = Arc<dyn Fn(&S) -> bool + Send + Sync>;
pub type Draw<S> = Arc<dyn Fn(&mut StreamRng) -> S + Send + Sync>;
pub type Move<S> = Arc<dyn Fn(&S, &mut StreamRng) -> S + Send + Sync>;

#[derive(Clone)]
enum Residual<S> {
    /// Draw from `P(x, .)` and accept with probability `1 - eps dnu/dP(x, .)(y)`;
    /// the closure returns `eps dnu/dP(x, .)(y)`.
    AcceptReject(Arc<dyn Fn(&S, &S) -> f64 + Send + Sync>),
    Direct(Move<S>),
}

/// `(C, eps, nu)` with `P(x, .) >= eps nu` for `x` in `C`.
#[derive(Clone)]
pub struct SmallSetSpec<S> {
    contains: Pred<S>,
    epsilon: f64,
    nu: Draw<S>,
    nu_exact: Option<Vec<f64>>,
    residual: Residual<S>,
    /// Exact residual rows for the states of `C` on finite spaces.
    rows: Option<Arc<Vec<Option<SparseRow>>>>,
}

impl<S> fmt::Debug for SmallSetSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmallSetSpec").field("epsilon", &self.epsilon).finish_non_exhaustive()
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Validation(format!("epsilon must lie in (0,1], got {eps}")));
    }
    Ok(())
}

impl SmallSetSpec<usize> {
    /// Exact small set on a finite kernel. Checks `nu(C) = 1` and the
    /// componentwise minorisation, and tabulates the residual rows.
    pub fn finite(kernel: &FiniteKernel, c: &[usize], epsilon: f64, nu: &[f64]) -> Result<Self> {
        check_epsilon(epsilon)?;
        let n = kernel.n();
        if nu.len() != n {
            return Err(Error::Validation(format!("nu has length {} != {n}", nu.len())));
        }
        if c.is_empty() {
            return Err(Error::Validation("C is empty".into()));
        }
        let mut in_c = vec![false; n];
        for &i in c {
            if i >= n {
                return Err(Error::Validation(format!("C contains {i} >= {n}")));
            }
            in_c[i] = true;
        }
        if nu.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Validation("nu has a negative or non-finite entry".into()));
        }
        let total: f64 = nu.iter().sum();
        let on_c: f64 = nu.iter().zip(&in_c).filter(|(_, &b)| b).map(|(x, _)| x).sum();
        if (total - 1.0).abs() > ROW_TOL || (on_c - 1.0).abs() > ROW_TOL {
            return Err(Error::Validation(format!("nu must be a probability with nu(C)=1, got total {total}, nu(C) {on_c}")));
        }
        let mut rows = vec![None; n];
        for &x in c {
            if epsilon == 1.0 {
                for (j, &m) in nu.iter().enumerate() {
                    let p = kernel.row(x).get(j);
                    if p < m - ROW_TOL {
                        return Err(Error::Minorisation { state: x, col: j, mass: p - m });
                    }
                }
                rows[x] = Some(SparseRow::dirac(x));
                continue;
            }
            let mut pairs = Vec::new();
            for j in 0..n {
                let mass = kernel.row(x).get(j) - epsilon * nu[j];
                if mass < -ROW_TOL {
                    return Err(Error::Minorisation { state: x, col: j, mass });
                }
                if mass > 0.0 {
                    pairs.push((j, mass / (1.0 - epsilon)));
                }
            }
            let mut row = SparseRow::from_pairs(pairs);
            let t = row.total();
            row.prob.iter_mut().for_each(|p| *p /= t);
            row.cum.iter_mut().for_each(|p| *p /= t);
            rows[x] = Some(row);
        }
        let nu_row = SparseRow::from_dense(nu);
        let in_c = Arc::new(in_c);
        let rows = Arc::new(rows);
        let table = rows.clone();
        Ok(Self {
            contains: Arc::new(move |x: &usize| in_c.get(*x).copied().unwrap_or(false)),
            epsilon,
            nu: Arc::new(move |rng| nu_row.sample(rng)),
            nu_exact: Some(nu.to_vec()),
            residual: Residual::Direct(Arc::new(move |x: &usize, rng: &mut StreamRng| {
                table[*x].as_ref().expect("residual row for a state of C").sample(rng)
            })),
            rows: Some(rows),
        })
    }

    /// Exact residual row `Q(x, .)` for `x` in `C`.
    pub fn residual_row(&self, x: usize) -> Option<&SparseRow> {
        self.rows.as_ref().and_then(|rows| rows.get(x)).and_then(|r| r.as_ref())
    }
}

impl<S: Clone + Send + Sync + 'static> SmallSetSpec<S> {
    /// Small set whose residual is sampled by accept-reject against `P`;
    /// `eps_ratio(x, y)` must return `eps dnu/dP(x,.)(y)` in `[0, 1]`.
    pub fn accept_reject(
        contains: Pred<S>,
        epsilon: f64,
        nu: Draw<S>,
        eps_ratio: Arc<dyn Fn(&S, &S) -> f64 + Send + Sync>,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self { contains, epsilon, nu, nu_exact: None, residual: Residual::AcceptReject(eps_ratio), rows: None })
    }

    /// Small set with a directly supplied sampler for `Q(x, .)`, `x` in `C`.
    pub fn with_residual(contains: Pred<S>, epsilon: f64, nu: Draw<S>, residual: Move<S>) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self { contains, epsilon, nu, nu_exact: None, residual: Residual::Direct(residual), rows: None })
    }
}

impl<S> SmallSetSpec<S> {
    pub fn contains(&self, x: &S) -> bool {
        (self.contains)(x)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sample_nu(&self, rng: &mut StreamRng) -> S {
        (self.nu)(rng)
    }

    pub fn nu_exact(&self) -> Option<&[f64]> {
        self.nu_exact.as_deref()
    }

    /// `eps 1_C(x)`.
    pub fn head_probability(&self, x: &S) -> f64 {
        if self.contains(x) {
            self.epsilon
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------- drift

pub type StateFn<S> = Arc<dyn Fn(&S) -> f64 + Send + Sync>;

/// `(V, phi, b)` for the drift `PV <= V - phi(V) + b 1_C`.
#[derive(Clone)]
pub struct DriftSpec<S> {
    v: StateFn<S>,
    pub rate: RateSpec,
    pub b: f64,
}

impl<S> fmt::Debug for DriftSpec<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftSpec").field("rate", &self.rate).field("b", &self.b).finish_non_exhaustive()
    }
}

impl<S> DriftSpec<S> {
    pub fn new(v: StateFn<S>, rate: RateSpec, b: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::Validation(format!("b must be positive and finite, got {b}")));
        }
        Ok(Self { v, rate, b })
    }

    pub fn v(&self, x: &S) -> f64 {
        (self.v)(x)
    }

    pub fn v_fn(&self) -> StateFn<S> {
        self.v.clone()
    }
}

impl DriftSpec<usize> {
    pub fn from_vector(v: Vec<f64>, rate: RateSpec, b: f64) -> Result<Self> {
        if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x >= 1.0 && x.is_finite())) {
            return Err(Error::Validation(format!("V({i}) = {x} must be finite and >= 1")));
        }
        let v = Arc::new(v);
        Self::new(Arc::new(move |x: &usize| v[*x]), rate, b)
    }
}

// ---------------------------------------------------------------- split chain

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitState<S> {
    pub x: S,
    pub d: u8,
}

/// Initial law of the underlying chain.
#[derive(Clone)]
pub enum Initial<S> {
    Point(S),
    Nu,
    Sampler(Draw<S>),
}

impl<S: fmt::Debug> fmt::Debug for Initial<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Initial::Point(x) => write!(f, "Point({x:?})"),
            Initial::Nu => write!(f, "Nu"),
            Initial::Sampler(_) => write!(f, "Sampler"),
        }
    }
}

fn toss<S>(ss: &SmallSetSpec<S>, x: &S, rng: &mut StreamRng) -> u8 {
    let p = ss.head_probability(x);
    if p <= 0.0 {
        0
    } else {
        u8::from(rng.gen::<f64>() < p)
    }
}

/// One draw from `Q(x, .)`.
pub fn residual_sample<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    x: &K::State,
    rng: &mut StreamRng,
) -> K::State {
    if !ss.contains(x) {
        return kernel.sample(x, rng);
    }
    if ss.epsilon >= 1.0 {
        return x.clone();
    }
    match &ss.residual {
        Residual::AcceptReject(ratio) => loop {
            let y = kernel.sample(x, rng);
            if rng.gen::<f64>() >= ratio(x, &y) {
                break y;
            }
        },
        Residual::Direct(f) => f(x, rng),
    }
}

/// `(X_n, d_n) -> (X_{n+1}, d_{n+1})`.
pub fn split_step<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    s: &SplitState<K::State>,
    rng: &mut StreamRng,
) -> SplitState<K::State> {
    let x = if s.d == 1 { ss.sample_nu(rng) } else { residual_sample(kernel, ss, &s.x, rng) };
    let d = toss(ss, &x, rng);
    SplitState { x, d }
}

/// A draw from the split law `mu-check` of `mu`.
pub fn split_initial<S: Clone>(mu: &Initial<S>, ss: &SmallSetSpec<S>, rng: &mut StreamRng) -> SplitState<S> {
    let x = match mu {
        Initial::Point(x) => x.clone(),
        Initial::Nu => ss.sample_nu(rng),
        Initial::Sampler(f) => f(rng),
    };
    let d = toss(ss, &x, rng);
    SplitState { x, d }
}

// ---------------------------------------------------------------- finite chains

/// JSON chain document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChainFile {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<usize>,
    pub epsilon: f64,
    pub nu: Vec<f64>,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    pub phi: RateConfig,
    pub b: f64,
}

/// A finite chain with exact small-set and drift data.
#[derive(Debug, Clone)]
pub struct FiniteChain {
    pub kernel: FiniteKernel,
    pub small_set: SmallSetSpec<usize>,
    pub drift: DriftSpec<usize>,
    c: Vec<usize>,
    in_c: Vec<bool>,
    v: Vec<f64>,
    q_rows: Vec<SparseRow>,
}

impl FiniteChain {
    pub fn new(kernel: FiniteKernel, c: &[usize], epsilon: f64, nu: &[f64], v: Vec<f64>, rate: RateSpec, b: f64) -> Result<Self> {
        let n = kernel.n();
        if v.len() != n {
            return Err(Error::Validation(format!("V has length {} != {n}", v.len())));
        }
        let small_set = SmallSetSpec::finite(&kernel, c, epsilon, nu)?;
        let drift = DriftSpec::from_vector(v.clone(), rate, b)?;
        let mut in_c = vec![false; n];
        c.iter().for_each(|&i| in_c[i] = true);
        let q_rows = (0..n)
            .map(|i| small_set.residual_row(i).cloned().unwrap_or_else(|| kernel.row(i).clone()))
            .collect();
        let mut c = c.to_vec();
        c.sort_unstable();
        c.dedup();
        Ok(Self { kernel, small_set, drift, c, in_c, v, q_rows })
    }

    pub fn from_file(file: &ChainFile) -> Result<Self> {
        let kernel = FiniteKernel::from_dense(&file.p)?;
        let rate = file.phi.build()?;
        Self::new(kernel, &file.c, file.epsilon, &file.nu, file.v.clone(), rate, file.b)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ChainFile = serde_json::from_str(s)?;
        Self::from_file(&file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// JSON document for chains with a serializable rate.
    pub fn to_file(&self) -> Result<ChainFile> {
        let phi = self
            .drift
            .rate
            .config()
            .ok_or_else(|| Error::Validation("custom rates cannot be exported".into()))?;
        Ok(ChainFile {
            p: self.kernel.dense(),
            c: self.c.clone(),
            epsilon: self.epsilon(),
            nu: self.nu().to_vec(),
            v: self.v.clone(),
            phi,
            b: self.drift.b,
        })
    }

    pub fn n(&self) -> usize {
        self.kernel.n()
    }

    pub fn epsilon(&self) -> f64 {
        self.small_set.epsilon()
    }

    pub fn c(&self) -> &[usize] {
        &self.c
    }

    pub fn in_c(&self, i: usize) -> bool {
        self.in_c[i]
    }

    pub fn in_c_mask(&self) -> &[bool] {
        &self.in_c
    }

    pub fn nu(&self) -> &[f64] {
        self.small_set.nu_exact().expect("finite small sets carry nu")
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn p_row(&self, i: usize) -> &SparseRow {
        self.kernel.row(i)
    }

    /// `Q(i, .)`, equal to `P(i, .)` off `C`.
    pub fn q_row(&self, i: usize) -> &SparseRow {
        &self.q_rows[i]
    }

    pub fn q_rows(&self) -> &[SparseRow] {
        &self.q_rows
    }

    /// `PV`.
    pub fn pv(&self) -> Vec<f64> {
        self.kernel.apply(&self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn three_state() -> FiniteChain {
        let p = vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.1, 0.5], vec![0.6, 0.2, 0.2]];
        let k = FiniteKernel::from_dense(&p).unwrap();
        FiniteChain::new(k, &[0], 0.2, &[1.0, 0.0, 0.0], vec![1.0, 24.0, 20.0], RateSpec::polynomial(0.6).unwrap(), 18.2).unwrap()
    }

    #[test]
    fn residual_row_matches_arithmetic() {
        let ch = three_state();
        let q = ch.q_row(0);
        assert_eq!(q.get(0), 0.0);
        assert!((q.get(1) - 0.625).abs() < 1e-15);
        assert!((q.get(2) - 0.375).abs() < 1e-15);
        assert_eq!(ch.q_row(1), ch.p_row(1));
    }

    #[test]
    fn mixture_identity_is_exact() {
        let ch = three_state();
        let e = ch.epsilon();
        for j in 0..3 {
            let lhs = e * ch.nu()[j] + (1.0 - e) * ch.q_row(0).get(j);
            assert!((lhs - ch.p_row(0).get(j)).abs() < 1e-15);
        }
    }

    #[test]
    fn minorisation_violation_is_reported() {
        let p = vec![vec![0.1, 0.9], vec![0.5, 0.5]];
        let k = FiniteKernel::from_dense(&p).unwrap();
        let err = SmallSetSpec::finite(&k, &[0], 0.2, &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Minorisation { state: 0, col: 0, .. }));
    }

    #[test]
    fn dirac_branch_and_sure_head() {
        let p = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let k = FiniteKernel::from_dense(&p).unwrap();
        let ss = SmallSetSpec::finite(&k, &[0, 1], 1.0, &[0.5, 0.5]).unwrap();
        let mut rng = substream(1, 0);
        for _ in 0..100 {
            assert_eq!(residual_sample(&k, &ss, &1, &mut rng), 1);
            let s = split_initial(&Initial::Point(0), &ss, &mut rng);
            assert_eq!(s.d, 1);
        }
    }

    #[test]
    fn outside_c_coin_is_tails() {
        let ch = three_state();
        let mut rng = substream(2, 0);
        for _ in 0..100 {
            let s = split_initial(&Initial::Point(2), &ch.small_set, &mut rng);
            assert_eq!(s, SplitState { x: 2, d: 0 });
        }
    }

    #[test]
    fn json_round_trip_and_diagnostics() {
        let ch = three_state();
        let s = serde_json::to_string(&ch.to_file().unwrap()).unwrap();
        let back = FiniteChain::from_json_str(&s).unwrap();
        assert_eq!(back.kernel.dense(), ch.kernel.dense());
        let err = FiniteChain::from_json_str("{\"P\": [[1.0]],\n \"C\": [0,").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }
}
