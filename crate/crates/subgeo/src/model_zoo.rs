//! Canonical chains with verified small-set and drift data.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::bound_engine::{drift_certificate, verify_drift, verify_drift_probe, BoundCertificate, DriftReport, DriftSummary, Grade};
use crate::chain_model::{DriftSpec, FiniteChain, FiniteKernel, RealKernel, SmallSetSpec, SparseRow, StateSpace};
use crate::rate_kit::{integrate, RateFamily, RateSpec};
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    Polynomial { alpha: f64 },
    Subexponential { alpha: f64 },
    GeometricTestOnly,
}

/// Reflected walk on `[0, inf)` with its fitted drift data.
#[derive(Clone)]
pub struct RealModel {
    pub kernel: RealKernel,
    pub small_set: SmallSetSpec<f64>,
    pub drift: DriftSpec<f64>,
    pub spec: ReflectedWalkSpec,
    /// `(x, V(x), PV(x), x in C)` on the verification grid.
    pub probe: Vec<(f64, f64, f64, bool)>,
    pub nu_v: f64,
    pub sup_c_pv: f64,
}

#[derive(Clone)]
pub enum ZooModel {
    Finite(FiniteChain),
    Real(Box<RealModel>),
}

#[derive(Clone)]
pub struct ZooEntry {
    pub name: String,
    pub description: String,
    pub regime: Regime,
    pub model: ZooModel,
    pub report: DriftReport,
    pub certificate: BoundCertificate,
    /// Mass of the untruncated jump law beyond the last kept state.
    pub truncation_leak: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZooInfo {
    pub name: String,
    pub description: String,
    pub regime: Regime,
    pub grade: Grade,
}

impl ZooEntry {
    pub fn finite(&self) -> Option<&FiniteChain> {
        match &self.model {
            ZooModel::Finite(c) => Some(c),
            ZooModel::Real(_) => None,
        }
    }

    pub fn real(&self) -> Option<&RealModel> {
        match &self.model {
            ZooModel::Real(m) => Some(m),
            ZooModel::Finite(_) => None,
        }
    }

    pub fn summary(&self) -> DriftSummary {
        match &self.model {
            ZooModel::Finite(c) => DriftSummary::from_finite(c),
            ZooModel::Real(m) => m.summary(),
        }
    }

    pub fn grade(&self) -> Grade {
        self.report.grade
    }

    pub fn info(&self) -> ZooInfo {
        ZooInfo { name: self.name.clone(), description: self.description.clone(), regime: self.regime, grade: self.grade() }
    }

    /// Wraps a user-supplied finite chain, verifying its drift.
    pub fn from_chain(name: &str, chain: FiniteChain) -> Result<Self> {
        let regime = match chain.drift.rate.family() {
            RateFamily::Polynomial { alpha, .. } => Regime::Polynomial { alpha: *alpha },
            RateFamily::LogPerturbed { alpha, .. } => Regime::Subexponential { alpha: *alpha },
            RateFamily::Custom { .. } => Regime::GeometricTestOnly,
        };
        Self::finish(name.to_string(), "chain loaded from JSON", regime, chain, &[])
    }

    fn finish(name: String, description: &str, regime: Regime, chain: FiniteChain, extra: &[(&str, f64, &str)]) -> Result<Self> {
        let report = verify_drift(&chain);
        if !report.holds {
            return Err(Error::Validation(format!("{name}: drift fails with margin {}", report.margin)));
        }
        let mut certificate = drift_certificate(&DriftSummary::from_finite(&chain), &report)?;
        for (k, v, f) in extra {
            certificate.set(k, *v, f, &[])?;
        }
        Ok(Self {
            name,
            description: description.to_string(),
            regime,
            model: ZooModel::Finite(chain),
            report,
            certificate,
            truncation_leak: None,
        })
    }
}

impl RealModel {
    pub fn summary(&self) -> DriftSummary {
        DriftSummary {
            epsilon: self.small_set.epsilon(),
            b: self.drift.b,
            rate: self.drift.rate.clone(),
            sup_c_v: self.drift.v(&self.spec.c0),
            sup_c_pv: Some(self.sup_c_pv),
            nu_v: self.nu_v,
            grade: Grade::Statistical,
        }
    }
}

/// Splits `name(a,b,...)` into the head and its numeric arguments.
fn parse_call(name: &str) -> Result<(&str, Vec<f64>)> {
    let name = name.trim();
    let Some(open) = name.find('(') else {
        return Ok((name, Vec::new()));
    };
    let inner = name[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| Error::Argument(format!("unbalanced parentheses in `{name}`")))?;
    let args = inner
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Argument(format!("bad argument `{s}` in `{name}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((&name[..open], args))
}

/// Builds a zoo entry by name; see [`list`] for the catalogue.
pub fn build(name: &str) -> Result<ZooEntry> {
    let (head, args) = parse_call(name)?;
    match head {
        "house-of-cards" => {
            let d = HouseOfCardsSpec::default();
            let spec = match args.as_slice() {
                [] => d,
                [k, s] => HouseOfCardsSpec { kappa: *k, s: *s, ..d },
                [k, s, t] => HouseOfCardsSpec { kappa: *k, s: *s, theta: *t, ..d },
                [k, s, t, n] => HouseOfCardsSpec { kappa: *k, s: *s, theta: *t, states: *n as usize },
                _ => return Err(Error::Argument(format!("house-of-cards takes up to 4 arguments, got {}", args.len()))),
            };
            build_house_of_cards(&spec)
        }
        "reflected-walk" => {
            let d = ReflectedWalkSpec::default();
            let spec = match args.as_slice() {
                [] => d,
                [rate, shift] => ReflectedWalkSpec { increment: Increment::ShiftedExponential { rate: *rate, shift: *shift }, ..d },
                _ => return Err(Error::Argument("reflected-walk takes 0 or 2 arguments".into())),
            };
            build_reflected_walk(&spec)
        }
        _ => build_finite_fixture(name),
    }
}

pub fn list() -> Vec<ZooInfo> {
    ["three-state-default", "two-state(0.3,0.4)", "iid(0.2,0.5,0.3)", "doubly-stochastic", "house-of-cards", "reflected-walk"]
        .iter()
        .map(|n| build(n).expect("catalogue entries build").info())
        .collect()
}

// ---------------------------------------------------------------- finite fixtures

pub fn build_finite_fixture(name: &str) -> Result<ZooEntry> {
    let (head, args) = parse_call(name)?;
    match (head, args.as_slice()) {
        ("three-state-default", []) => {
            let p = vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.1, 0.5], vec![0.6, 0.2, 0.2]];
            let chain = FiniteChain::new(
                FiniteKernel::from_dense(&p)?,
                &[0],
                0.2,
                &[1.0, 0.0, 0.0],
                vec![1.0, 24.0, 20.0],
                RateSpec::polynomial(0.6)?,
                18.2,
            )?;
            ZooEntry::finish(name.to_string(), "three-state chain with C={0}, eps=0.2", Regime::Polynomial { alpha: 0.6 }, chain, &[])
        }
        ("two-state", [p, q]) => {
            if !(*p > 0.0 && *p < 1.0 && *q > 0.0 && *q <= 1.0) {
                return Err(Error::Argument(format!("two-state needs p in (0,1), q in (0,1], got {p}, {q}")));
            }
            let mat = vec![vec![1.0 - p, *p], vec![*q, 1.0 - q]];
            auto_drift(name, "two-state chain with C={0}", &mat, 0.9 * (1.0 - p))
        }
        ("iid", pi) if !pi.is_empty() => {
            if pi.iter().any(|&x| !(x >= 0.0)) || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Argument(format!("iid needs a probability vector, got {pi:?}")));
            }
            let n = pi.len();
            let mat = vec![pi.to_vec(); n];
            let all: Vec<usize> = (0..n).collect();
            let chain = FiniteChain::new(FiniteKernel::from_dense(&mat)?, &all, 1.0, pi, vec![1.0; n], RateSpec::polynomial(0.5)?, 1.0)?;
            ZooEntry::finish(name.to_string(), "independent draws; C is the whole space and eps=1", Regime::GeometricTestOnly, chain, &[])
        }
        ("doubly-stochastic", []) => {
            let mat = vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.5, 0.3], vec![0.3, 0.2, 0.5]];
            auto_drift(name, "doubly stochastic three-state chain with C={0}", &mat, 0.45)
        }
        _ => Err(Error::Argument(format!("unknown zoo entry `{name}`"))),
    }
}

/// Fixture with `C={0}`, `nu=delta_0` and `V = 1 + lambda E_x[sigma_C]`, so
/// `PV = V - lambda` off `C`.
fn auto_drift(name: &str, description: &str, mat: &[Vec<f64>], epsilon: f64) -> Result<ZooEntry> {
    let n = mat.len();
    let alpha = 0.5;
    let rate = RateSpec::polynomial(alpha)?;
    let off: Vec<usize> = (1..n).collect();
    let m = off.len();
    let a = DMatrix::from_fn(m, m, |i, j| f64::from(i == j) - mat[off[i]][off[j]]);
    let h = a
        .lu()
        .solve(&DVector::from_element(m, 1.0))
        .ok_or_else(|| Error::Validation(format!("{name}: C is not reached from every state")))?;
    let h_max = h.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut lambda = 1.0f64;
    for _ in 0..200 {
        lambda = (1.0 + lambda * h_max).powf(alpha);
    }
    let lambda = 1.01 * lambda;
    let mut v = vec![1.0; n];
    for (i, &s) in off.iter().enumerate() {
        v[s] = 1.0 + lambda * h[i];
    }
    let pv0: f64 = mat[0].iter().zip(&v).map(|(p, v)| p * v).sum();
    let b = pv0 - v[0] + rate.phi(v[0]);
    let mut nu = vec![0.0; n];
    nu[0] = 1.0;
    let chain = FiniteChain::new(FiniteKernel::from_dense(mat)?, &[0], epsilon, &nu, v, rate, b)?;
    ZooEntry::finish(name.to_string(), description, Regime::GeometricTestOnly, chain, &[("lambda", lambda, "1.01 x fixed point of l = (1 + l max_x E_x sigma_C)^alpha")])
}

// ---------------------------------------------------------------- house of cards

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HouseOfCardsSpec {
    pub kappa: f64,
    pub s: f64,
    pub theta: f64,
    /// States kept are `0..states`.
    pub states: usize,
}

impl Default for HouseOfCardsSpec {
    fn default() -> Self {
        Self { kappa: 3.5, s: 2.5, theta: 0.9, states: 1001 }
    }
}

/// Jump law `p_j` propto `(1+j)^{-(1+kappa)}` on `0..states`.
pub fn house_of_cards_jumps(kappa: f64, states: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..states).map(|j| (1.0 + j as f64).powf(-(1.0 + kappa))).collect();
    let z: f64 = w.iter().rev().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// From `j > 0` step to `j - 1`; from `0` jump to `j` with probability `p_j`.
pub fn build_house_of_cards(spec: &HouseOfCardsSpec) -> Result<ZooEntry> {
    let HouseOfCardsSpec { kappa, s, theta, states } = *spec;
    if !(kappa > s && s > 1.0) {
        return Err(Error::Argument(format!("house-of-cards needs kappa > s > 1, got kappa={kappa}, s={s}")));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Argument(format!("theta must lie in (0,1], got {theta}")));
    }
    if states < 3 {
        return Err(Error::Argument("house-of-cards needs at least 3 states".into()));
    }
    let p = house_of_cards_jumps(kappa, states);
    let mut rows = Vec::with_capacity(states);
    rows.push(SparseRow::from_pairs(p.iter().copied().enumerate().collect()));
    rows.extend((1..states).map(|j| SparseRow::dirac(j - 1)));
    let kernel = FiniteKernel::new(rows, StateSpace::Countable)?;
    let v: Vec<f64> = (0..states).map(|j| (1.0 + j as f64).powf(s)).collect();
    let alpha = (s - 1.0) / s;
    // phi(V(j)) = c (1+j)^{s-1}; the drift off C needs c <= ((1+j)^s - j^s)/(1+j)^{s-1}.
    let c = (1..states)
        .map(|j| {
            let j = j as f64;
            ((1.0 + j).powf(s) - j.powf(s)) / (1.0 + j).powf(s - 1.0)
        })
        .fold(s, f64::min);
    let pv0: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
    let b = pv0 - 1.0 + c;
    let eps = theta * p[0];
    let mut nu = vec![0.0; states];
    nu[0] = 1.0;
    let chain = FiniteChain::new(kernel, &[0], eps, &nu, v, RateSpec::polynomial_scaled(c, alpha)?, b)?;
    let leak = (states as f64).powf(-kappa) / kappa;
    let mut entry = ZooEntry::finish(
        format!("house-of-cards({kappa},{s},{theta},{states})"),
        "descends by one, resets from 0 with polynomial jump law",
        Regime::Polynomial { alpha },
        chain,
        &[
            ("c", c, "min(s, min_{1<=j<N} ((1+j)^s - j^s)/(1+j)^{s-1})"),
            ("sum p_j V(j)", pv0, "series over kept states"),
            ("truncation leak", leak, "N^{-kappa}/kappa >= untruncated mass beyond N-1"),
        ],
    )?;
    entry.truncation_leak = Some(leak);
    Ok(entry)
}

// ---------------------------------------------------------------- reflected walk

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Increment {
    /// `W = Y - shift`, `Y ~ Exp(rate)`.
    ShiftedExponential { rate: f64, shift: f64 },
}

impl Increment {
    pub fn mean(&self) -> f64 {
        match *self {
            Increment::ShiftedExponential { rate, shift } => 1.0 / rate - shift,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReflectedWalkSpec {
    pub increment: Increment,
    pub c0: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Right end of the verification grid.
    pub x_max: f64,
    pub grid: usize,
}

impl Default for ReflectedWalkSpec {
    fn default() -> Self {
        Self { increment: Increment::ShiftedExponential { rate: 1.0, shift: 1.5 }, c0: 1.0, lambda: 0.5, gamma: 0.5, x_max: 400.0, grid: 1200 }
    }
}

/// `X' = (X + W)^+` with `V(x) = exp(lambda x^gamma)` and a log-perturbed rate
/// fitted on a grid. Statistical grade.
pub fn build_reflected_walk(spec: &ReflectedWalkSpec) -> Result<ZooEntry> {
    let ReflectedWalkSpec { increment, c0, lambda, gamma, x_max, grid } = *spec;
    if increment.mean() >= 0.0 {
        return Err(Error::Argument(format!("reflected walk needs a negative mean increment, got {}", increment.mean())));
    }
    let Increment::ShiftedExponential { rate, shift } = increment;
    if !(rate > 0.0 && shift > 0.0) {
        return Err(Error::Argument("increment rate and shift must be positive".into()));
    }
    if !(c0 > 0.0 && c0 <= shift) {
        return Err(Error::Argument(format!("c0 must lie in (0, shift], got {c0}")));
    }
    if !(gamma > 0.0 && gamma < 1.0 && lambda > 0.0) {
        return Err(Error::Argument("need gamma in (0,1) and lambda > 0".into()));
    }
    if !(x_max > c0 && grid >= 32) {
        return Err(Error::Argument("verification grid must extend past c0 with >= 32 points".into()));
    }
    let cdf = move |w: f64| if w <= 0.0 { 0.0 } else { 1.0 - (-rate * w).exp() };
    let ln_v = move |x: f64| lambda * x.max(0.0).powf(gamma);
    // PV(x) = F((m-x)^+) + e^{rate (x-m)} int_{(x-m)^+}^inf rate exp(ln V(z) - rate z) dz
    let pv = move |x: f64| {
        let z0 = (x - shift).max(0.0);
        let base = ln_v(z0) - rate * z0;
        let len = 80.0 / rate + 4.0 * (lambda / rate).powf(1.0 / (1.0 - gamma));
        let g = integrate(&|z: f64| rate * (ln_v(z) - rate * z - base).exp(), z0, z0 + len);
        cdf(shift - x) + (rate * (x - shift) + base).exp() * g
    };

    let atom = cdf(shift - c0);
    let dens = (-rate * shift).exp() * (1.0 - (-rate * c0).exp());
    let eps = atom + dens;
    let nu_v = (atom + integrate(&|y: f64| (ln_v(y) - rate * (y + shift)).exp() * rate, 0.0, c0)) / eps;

    let mut xs: Vec<f64> = (0..=200).map(|i| c0 * i as f64 / 200.0).collect();
    let span = (x_max / c0).ln();
    xs.extend((1..=grid).map(|i| c0 * (span * i as f64 / grid as f64).exp()));
    let probe_raw: Vec<(f64, f64, f64, bool)> = xs.iter().map(|&x| (x, ln_v(x).exp(), pv(x), x <= c0)).collect();

    let alpha = (1.0 - gamma) / gamma;
    let d = match RateSpec::log_perturbed(1.0, alpha, None)?.family() {
        RateFamily::LogPerturbed { d, .. } => *d,
        _ => unreachable!("log-perturbed family"),
    };
    let shape = |v: f64| (v + d) / (v + d).ln().powf(alpha);
    let mut c_fit = f64::INFINITY;
    for &(x, v, p, in_c) in &probe_raw {
        if in_c {
            continue;
        }
        let margin = v - p;
        if margin <= 0.0 {
            return Err(Error::Validation(format!("reflected walk: V - PV = {margin} <= 0 at x = {x}")));
        }
        c_fit = c_fit.min(margin / shape(v));
    }
    let c_phi = 0.99 * c_fit;
    let rate_spec = RateSpec::log_perturbed(c_phi, alpha, Some(d))?;
    let b = 1.01 * probe_raw.iter().filter(|p| p.3).map(|&(_, v, p, _)| p - v + rate_spec.phi(v)).fold(f64::MIN, f64::max);
    let sup_c_pv = probe_raw.iter().filter(|p| p.3).map(|p| p.2).fold(f64::MIN, f64::max);

    let report = verify_drift_probe(&probe_raw, &rate_spec, b, Grade::Statistical);
    if !report.holds {
        return Err(Error::Validation(format!("reflected walk: drift fails with margin {}", report.margin)));
    }
    // eps dnu/dP(x,.)(y): atom / F(m-x) at 0, e^{-rate x} on (0, c0], 0 beyond.
    let ratio = Arc::new(move |x: &f64, y: &f64| {
        if *y == 0.0 {
            let fx = cdf(shift - x);
            if fx > 0.0 { (atom / fx).min(1.0) } else { 0.0 }
        } else if *y <= c0 {
            (-rate * x).exp()
        } else {
            0.0
        }
    });
    for &x in xs.iter().filter(|&&x| x <= c0) {
        for &y in &xs {
            let r = ratio(&x, &y);
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Validation(format!("minorisation ratio {r} at ({x}, {y})")));
            }
        }
    }
    let (f_lo, f_hi) = (cdf(shift), cdf(shift + c0));
    let nu_draw = Arc::new(move |rng: &mut StreamRng| {
        if rng.gen::<f64>() * eps < atom {
            0.0
        } else {
            let u = f_lo + rng.gen::<f64>() * (f_hi - f_lo);
            (-(1.0 - u).ln() / rate - shift).clamp(f64::MIN_POSITIVE, c0)
        }
    });
    let small_set = SmallSetSpec::accept_reject(Arc::new(move |x: &f64| *x <= c0), eps, nu_draw, ratio)?;
    let kernel = RealKernel::new(
        0.0,
        Arc::new(move |x: f64, rng: &mut StreamRng| {
            let y = -(1.0 - rng.gen::<f64>()).ln() / rate;
            (x + y - shift).max(0.0)
        }),
    );
    let drift = DriftSpec::new(Arc::new(move |x: &f64| ln_v(*x).exp()), rate_spec.clone(), b)?;
    let model = RealModel { kernel, small_set, drift, spec: *spec, probe: probe_raw, nu_v, sup_c_pv };
    let mut certificate = drift_certificate(&model.summary(), &report)?;
    certificate.set("c_phi", c_phi, "0.99 min_{grid, x > c0} (V - PV)(x) log^alpha(V+d)/(V+d)", &[("d", d), ("alpha", alpha)])?;
    certificate.set("d", d, "smallest admissible shift", &[])?;
    Ok(ZooEntry {
        name: "reflected-walk".into(),
        description: "(X + Y - m)^+ with Y exponential; drift fitted on a grid".into(),
        regime: Regime::Subexponential { alpha },
        model: ZooModel::Real(Box::new(model)),
        report,
        certificate,
        truncation_leak: None,
    })
}
