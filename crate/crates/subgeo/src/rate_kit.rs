//! Drift-rate calculus: `phi`, `Phi`, `Phi^{-1}`, `r_phi`, `H_psi`, the class
//! `G(phi)` and subgeometric sequence utilities.
//!
//! Integrals are taken in the logarithmic variable `t = ln v`, which keeps the
//! integrands smooth over many decades and lets `Phi^{-1}` be returned as a
//! logarithm when it would overflow.

use std::fmt;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

const QUAD_REL: f64 = 1e-10;
const QUAD_ABS: f64 = 1e-12;
const BISECT_WIDTH: f64 = 1e-12;
const G_TOL: f64 = 1e-12;

// ---------------------------------------------------------------- quadrature

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol || m <= a || m >= b {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`, relative tolerance
/// `1e-10` and absolute tolerance `1e-12`.
///
/// Long ranges are cut into geometrically growing panels first, so that
/// integrands growing like `exp(kt)` are resolved panel by panel.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let w = b - a;
    let mut cuts = vec![0.0];
    let mut s = 1.0;
    while s < w {
        cuts.push(s);
        s = if s < 16.0 { s + 1.0 } else { 2.0 * s };
    }
    cuts.push(w);
    let panels: Vec<(f64, f64, f64, f64, f64, f64)> = cuts
        .windows(2)
        .map(|p| {
            let (x0, x1) = (a + p[0], a + p[1]);
            let xm = 0.5 * (x0 + x1);
            let (f0, fm, f1) = (f(x0), f(xm), f(x1));
            let s = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
            (x0, x1, f0, fm, f1, s)
        })
        .collect();
    let np = panels.len() as f64;
    panels
        .into_iter()
        .map(|(x0, x1, f0, fm, f1, s)| {
            let tol = (QUAD_REL * s.abs()).max(QUAD_ABS / np);
            simpson_rec(f, x0, x1, f0, fm, f1, s, tol, 48)
        })
        .sum()
}

/// `ln(e^x + e^y)` without overflow.
fn log_add(x: f64, y: f64) -> f64 {
    let (hi, lo) = if x > y { (x, y) } else { (y, x) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `n` log-spaced points from `a` to `b` inclusive.
pub fn log_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(a > 0.0 && b > a && n >= 2);
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                b
            } else {
                (la + (lb - la) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// The default certification grid: 256 log-spaced points over `[1, 1e12]`.
pub fn default_grid() -> Vec<f64> {
    log_grid(1.0, 1e12, 256)
}

// ---------------------------------------------------------------- RateSpec

#[derive(Clone)]
pub enum RateFamily {
    /// `phi(v) = c v^alpha`.
    Polynomial { c: f64, alpha: f64 },
    /// `phi(v) = c (v + d) / ln(v + d)^alpha`.
    LogPerturbed { c: f64, d: f64, alpha: f64 },
    Custom { name: String, phi: RealFn, dphi: RealFn },
}

/// A concave, non-decreasing drift rate `phi: [1, inf) -> (0, inf)`.
#[derive(Clone)]
pub struct RateSpec {
    family: RateFamily,
}

impl fmt::Debug for RateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RateSpec({})", self.describe())
    }
}

/// Serializable form used by the JSON chain format.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RateConfig {
    Polynomial {
        alpha: f64,
        #[serde(default = "one")]
        c: f64,
    },
    LogPerturbed {
        alpha: f64,
        #[serde(default = "one")]
        c: f64,
        #[serde(default)]
        d: Option<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl RateConfig {
    pub fn build(&self) -> Result<RateSpec> {
        match *self {
            RateConfig::Polynomial { alpha, c } => RateSpec::polynomial_scaled(c, alpha),
            RateConfig::LogPerturbed { alpha, c, d } => RateSpec::log_perturbed(c, alpha, d),
        }
    }
}

fn ln_phi_logperturbed(c: f64, d: f64, alpha: f64, t: f64) -> f64 {
    let l = log_add(t, d.ln());
    c.ln() + l - alpha * l.ln()
}

fn logperturbed_admissible(alpha: f64, d: f64, grid: &[f64]) -> bool {
    grid.iter().all(|&v| {
        let l = (v + d).ln();
        let d1 = l.powf(-alpha - 1.0) * (l - alpha);
        let d2 = alpha * l.powf(-alpha - 2.0) * (alpha + 1.0 - l) / (v + d);
        l > 0.0 && d1 > 0.0 && d2 < 0.0
    })
}

impl RateSpec {
    /// `phi(v) = v^alpha`.
    pub fn polynomial(alpha: f64) -> Result<Self> {
        Self::polynomial_scaled(1.0, alpha)
    }

    /// `phi(v) = c v^alpha`.
    pub fn polynomial_scaled(c: f64, alpha: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) || !(0.0 < alpha && alpha < 1.0) {
            return Err(Error::Argument(format!(
                "polynomial rate needs c > 0 and alpha in (0,1), got c={c}, alpha={alpha}"
            )));
        }
        Ok(Self { family: RateFamily::Polynomial { c, alpha } })
    }

    /// `phi(v) = c (v+d) / ln(v+d)^alpha`. When `d` is omitted the smallest
    /// admissible value on the default grid is searched for.
    pub fn log_perturbed(c: f64, alpha: f64, d: Option<f64>) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) || !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Argument(format!(
                "log-perturbed rate needs c > 0 and alpha > 0, got c={c}, alpha={alpha}"
            )));
        }
        let grid = default_grid();
        let d = match d {
            Some(d) => {
                if !logperturbed_admissible(alpha, d, &grid) {
                    return Err(Error::Argument(format!(
                        "d={d} does not make phi concave increasing on [1,1e12]"
                    )));
                }
                d
            }
            None => Self::smallest_admissible_d(alpha, &grid),
        };
        Ok(Self { family: RateFamily::LogPerturbed { c, d, alpha } })
    }

    fn smallest_admissible_d(alpha: f64, grid: &[f64]) -> f64 {
        let mut lo = 0.0;
        let mut hi = 1.0;
        while !logperturbed_admissible(alpha, hi, grid) {
            lo = hi;
            hi *= 2.0;
        }
        while hi - lo > 1e-10 * hi {
            let mid = 0.5 * (lo + hi);
            if logperturbed_admissible(alpha, mid, grid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    /// User-supplied `phi` and `phi'`, checked for positivity, monotonicity and
    /// concavity on the default grid.
    pub fn custom(name: &str, phi: RealFn, dphi: RealFn) -> Result<Self> {
        let spec = Self { family: RateFamily::Custom { name: name.to_string(), phi, dphi } };
        spec.check_shape(&default_grid())?;
        Ok(spec)
    }

    pub fn family(&self) -> &RateFamily {
        &self.family
    }

    pub fn describe(&self) -> String {
        match &self.family {
            RateFamily::Polynomial { c, alpha } => format!("polynomial(c={c}, alpha={alpha})"),
            RateFamily::LogPerturbed { c, d, alpha } => {
                format!("log_perturbed(c={c}, d={d}, alpha={alpha})")
            }
            RateFamily::Custom { name, .. } => format!("custom({name})"),
        }
    }

    pub fn config(&self) -> Option<RateConfig> {
        match self.family {
            RateFamily::Polynomial { c, alpha } => Some(RateConfig::Polynomial { alpha, c }),
            RateFamily::LogPerturbed { c, d, alpha } => {
                Some(RateConfig::LogPerturbed { alpha, c, d: Some(d) })
            }
            RateFamily::Custom { .. } => None,
        }
    }

    /// Exponent `alpha` for the two analytic families.
    pub fn alpha(&self) -> Option<f64> {
        match self.family {
            RateFamily::Polynomial { alpha, .. } | RateFamily::LogPerturbed { alpha, .. } => {
                Some(alpha)
            }
            RateFamily::Custom { .. } => None,
        }
    }

    pub fn phi(&self, v: f64) -> f64 {
        match &self.family {
            RateFamily::Polynomial { c, alpha } => c * v.powf(*alpha),
            RateFamily::LogPerturbed { c, d, alpha } => c * (v + d) / (v + d).ln().powf(*alpha),
            RateFamily::Custom { phi, .. } => phi(v),
        }
    }

    pub fn dphi(&self, v: f64) -> f64 {
        match &self.family {
            RateFamily::Polynomial { c, alpha } => c * alpha * v.powf(alpha - 1.0),
            RateFamily::LogPerturbed { c, d, alpha } => {
                let l = (v + d).ln();
                c * l.powf(-alpha - 1.0) * (l - alpha)
            }
            RateFamily::Custom { dphi, .. } => dphi(v),
        }
    }

    /// `ln phi(e^t)`, stable for large `t`.
    pub fn ln_phi_exp(&self, t: f64) -> f64 {
        match &self.family {
            RateFamily::Polynomial { c, alpha } => c.ln() + alpha * t,
            RateFamily::LogPerturbed { c, d, alpha } => ln_phi_logperturbed(*c, *d, *alpha, t),
            RateFamily::Custom { phi, .. } => phi(t.exp()).ln(),
        }
    }

    fn phi_integrand(&self, t: f64) -> f64 {
        (t - self.ln_phi_exp(t)).exp()
    }

    fn check_shape(&self, grid: &[f64]) -> Result<()> {
        let p1 = self.phi(1.0);
        if !(p1 > 0.0 && p1.is_finite()) {
            return Err(Error::Argument(format!("phi(1) must be positive, got {p1}")));
        }
        let vals: Vec<f64> = grid.iter().map(|&v| self.phi(v)).collect();
        for w in vals.windows(2) {
            if w[1] < w[0] * (1.0 - 1e-12) {
                return Err(Error::Argument("phi decreases on the grid".into()));
            }
        }
        let slopes: Vec<f64> = (0..grid.len() - 1)
            .map(|i| (vals[i + 1] - vals[i]) / (grid[i + 1] - grid[i]))
            .collect();
        for w in slopes.windows(2) {
            if w[1] > w[0] + 1e-10 * w[0].abs().max(1e-300) {
                return Err(Error::Argument("phi is not concave on the grid".into()));
            }
        }
        Ok(())
    }

    /// `Phi(v) = int_1^v dx / phi(x)`.
    pub fn big_phi(&self, v: f64) -> Result<f64> {
        if !(v >= 1.0) {
            return Err(Error::Domain(format!("Phi needs v >= 1, got {v}")));
        }
        if !v.is_finite() {
            return Ok(f64::INFINITY);
        }
        Ok(integrate(&|t| self.phi_integrand(t), 0.0, v.ln()))
    }

    /// `ln Phi^{-1}(u)`: doubling bracket in `ln v` followed by bisection down
    /// to a relative width of `1e-12` and a final secant step.
    pub fn ln_big_phi_inverse(&self, u: f64) -> Result<f64> {
        if !(u >= 0.0) || u.is_nan() {
            return Err(Error::Domain(format!("Phi^-1 needs u >= 0, got {u}")));
        }
        if u == 0.0 {
            return Ok(0.0);
        }
        if !u.is_finite() {
            return Ok(f64::INFINITY);
        }
        let h = |t: f64| self.phi_integrand(t);
        let (mut lo, mut flo) = (0.0, 0.0);
        let mut hi = std::f64::consts::LN_2;
        let mut fhi = integrate(&h, lo, hi);
        while fhi < u {
            lo = hi;
            flo = fhi;
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::Domain(format!("Phi^-1({u}) out of range")));
            }
            fhi = flo + integrate(&h, lo, hi);
        }
        while hi - lo > BISECT_WIDTH * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let fmid = flo + integrate(&h, lo, mid);
            if fmid < u {
                lo = mid;
                flo = fmid;
            } else {
                hi = mid;
                fhi = fmid;
            }
        }
        let t = if fhi > flo { lo + (u - flo) * (hi - lo) / (fhi - flo) } else { 0.5 * (lo + hi) };
        Ok(t.clamp(lo, hi))
    }

    pub fn big_phi_inverse(&self, u: f64) -> Result<f64> {
        Ok(self.ln_big_phi_inverse(u)?.exp())
    }

    /// `ln r_phi(u)` for real `u >= 0`.
    pub fn ln_rate(&self, u: f64) -> Result<f64> {
        let t = self.ln_big_phi_inverse(u)?;
        Ok(self.ln_phi_exp(t) - self.ln_phi_exp(0.0))
    }

    /// `r_phi(u) = phi(Phi^{-1}(u)) / phi(1)`.
    pub fn rate(&self, u: f64) -> Result<f64> {
        Ok(self.ln_rate(u)?.exp())
    }
}

/// `Phi(v)`.
pub fn big_phi(rate: &RateSpec, v: f64) -> Result<f64> {
    rate.big_phi(v)
}

/// `Phi^{-1}(u)`.
pub fn big_phi_inverse(rate: &RateSpec, u: f64) -> Result<f64> {
    rate.big_phi_inverse(u)
}

/// `r_phi(k)`.
pub fn rate_sequence(rate: &RateSpec, k: u64) -> Result<f64> {
    rate.rate(k as f64)
}

// ---------------------------------------------------------------- PsiSpec

#[derive(Clone)]
pub enum PsiFamily {
    /// `psi(v) = v^beta`.
    Power { beta: f64 },
    /// `psi(v) = ln(s+v)^beta`, `s >= 1`.
    LogPower { beta: f64, shift: f64 },
    /// `psi = phi`.
    Rate(RateSpec),
    Custom { name: String, psi: RealFn },
}

#[derive(Clone)]
pub struct PsiSpec {
    family: PsiFamily,
}

impl fmt::Debug for PsiSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PsiSpec({})", self.describe())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PsiConfig {
    Power { beta: f64 },
    LogPower {
        beta: f64,
        #[serde(default = "one")]
        shift: f64,
    },
    Phi,
}

impl PsiConfig {
    pub fn build(&self, rate: &RateSpec) -> Result<PsiSpec> {
        match *self {
            PsiConfig::Power { beta } => PsiSpec::power(beta),
            PsiConfig::LogPower { beta, shift } => PsiSpec::log_power_shifted(beta, shift),
            PsiConfig::Phi => Ok(PsiSpec::of_rate(rate)),
        }
    }
}

impl PsiSpec {
    pub fn power(beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Argument(format!("power envelope needs beta >= 0, got {beta}")));
        }
        Ok(Self { family: PsiFamily::Power { beta } })
    }

    /// `psi(v) = ln(1+v)^beta`.
    pub fn log_power(beta: f64) -> Result<Self> {
        Self::log_power_shifted(beta, 1.0)
    }

    /// `psi(v) = ln(s+v)^beta`. Against `phi = c(v+d)/ln(v+d)^alpha` the
    /// choice `s = d` with `ln(1+d) >= alpha+beta` puts `psi` in `G(phi)` on
    /// all of `[1, inf)`, while `s = 1` only does so eventually.
    pub fn log_power_shifted(beta: f64, shift: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) || !(shift >= 1.0 && shift.is_finite()) {
            return Err(Error::Argument(format!(
                "log-power envelope needs beta >= 0 and shift >= 1, got beta={beta}, shift={shift}"
            )));
        }
        Ok(Self { family: PsiFamily::LogPower { beta, shift } })
    }

    pub fn constant() -> Self {
        Self { family: PsiFamily::Power { beta: 0.0 } }
    }

    pub fn of_rate(rate: &RateSpec) -> Self {
        Self { family: PsiFamily::Rate(rate.clone()) }
    }

    pub fn custom(name: &str, psi: RealFn) -> Result<Self> {
        let spec = Self { family: PsiFamily::Custom { name: name.to_string(), psi } };
        let grid = default_grid();
        let p1 = spec.eval(1.0);
        if !(p1 > 0.0 && p1.is_finite()) {
            return Err(Error::Argument(format!("psi(1) must be positive, got {p1}")));
        }
        if grid.windows(2).any(|w| spec.eval(w[1]) < spec.eval(w[0]) * (1.0 - 1e-12)) {
            return Err(Error::Argument(format!("psi `{name}` decreases on the grid")));
        }
        Ok(spec)
    }

    pub fn family(&self) -> &PsiFamily {
        &self.family
    }

    pub fn describe(&self) -> String {
        match &self.family {
            PsiFamily::Power { beta } => format!("power(beta={beta})"),
            PsiFamily::LogPower { beta, shift } => format!("log_power(beta={beta}, shift={shift})"),
            PsiFamily::Rate(r) => format!("phi[{}]", r.describe()),
            PsiFamily::Custom { name, .. } => format!("custom({name})"),
        }
    }

    /// `ln psi(e^t)`.
    pub fn ln_at_exp(&self, t: f64) -> f64 {
        match &self.family {
            PsiFamily::Power { beta } => beta * t,
            PsiFamily::LogPower { beta, shift } => {
                if *beta == 0.0 {
                    0.0
                } else {
                    beta * log_add(t, shift.ln()).ln()
                }
            }
            PsiFamily::Rate(r) => r.ln_phi_exp(t),
            PsiFamily::Custom { psi, .. } => psi(t.exp()).ln(),
        }
    }

    pub fn eval(&self, v: f64) -> f64 {
        match &self.family {
            PsiFamily::Power { beta } => v.powf(*beta),
            PsiFamily::LogPower { beta, shift } => (shift + v).ln().powf(*beta),
            PsiFamily::Rate(r) => r.phi(v),
            PsiFamily::Custom { psi, .. } => psi(v),
        }
    }
}

/// `H_psi(v) = int_1^v psi/phi`.
pub fn h_psi(rate: &RateSpec, psi: &PsiSpec, v: f64) -> Result<f64> {
    if !(v >= 1.0) {
        return Err(Error::Domain(format!("H_psi needs v >= 1, got {v}")));
    }
    Ok(integrate(&|t| (psi.ln_at_exp(t) + t - rate.ln_phi_exp(t)).exp(), 0.0, v.ln()))
}

/// `H_psi` evaluated along an increasing grid by accumulating panel integrals.
pub fn h_psi_on_grid(rate: &RateSpec, psi: &PsiSpec, grid: &[f64]) -> Vec<f64> {
    let f = |t: f64| (psi.ln_at_exp(t) + t - rate.ln_phi_exp(t)).exp();
    let mut acc = 0.0;
    let mut prev = 0.0;
    grid.iter()
        .map(|&v| {
            let t = v.max(1.0).ln();
            acc += integrate(&f, prev, t);
            prev = t.max(prev);
            acc
        })
        .collect()
}

// ---------------------------------------------------------------- G(phi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    PsiDecreasing,
    RatioIncreasing,
}

#[derive(Debug, Clone, Serialize)]
pub struct GViolation {
    pub v_left: f64,
    pub v_right: f64,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct GReport {
    pub member: bool,
    /// True when `member` was decided in closed form rather than on the grid.
    pub analytic: bool,
    pub violations: Vec<GViolation>,
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Argument("empty grid".into()));
    }
    if grid.len() < 32 {
        return Err(Error::Argument(format!("grid needs >= 32 points, got {}", grid.len())));
    }
    if grid[0] < 1.0 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("grid must be strictly increasing within [1, inf)".into()));
    }
    Ok(())
}

/// Violations of the `G(phi)` shape conditions for pointwise log-values
/// `ln psi` and `ln phi` sampled on a grid.
pub(crate) fn g_violations(grid: &[f64], ln_psi: &[f64], ln_phi: &[f64]) -> Vec<GViolation> {
    let mut out = Vec::new();
    for i in 0..grid.len() - 1 {
        let (a, b) = (ln_psi[i], ln_psi[i + 1]);
        if b < a - G_TOL * (1.0 + a.abs()) {
            out.push(GViolation {
                v_left: grid[i],
                v_right: grid[i + 1],
                kind: ViolationKind::PsiDecreasing,
            });
        }
        let (qa, qb) = (a - ln_phi[i], b - ln_phi[i + 1]);
        if qb > qa + G_TOL * (1.0 + qa.abs()) {
            out.push(GViolation {
                v_left: grid[i],
                v_right: grid[i + 1],
                kind: ViolationKind::RatioIncreasing,
            });
        }
    }
    out
}

/// Sampled check that `psi` is non-decreasing and `psi/phi` non-increasing at
/// every adjacent grid pair. Power envelopes against polynomial rates are
/// answered exactly; everything else is a necessary-condition check.
pub fn check_g_membership(rate: &RateSpec, psi: &PsiSpec, grid: &[f64]) -> Result<GReport> {
    validate_grid(grid)?;
    let ln_psi: Vec<f64> = grid.iter().map(|v| psi.ln_at_exp(v.ln())).collect();
    let ln_phi: Vec<f64> = grid.iter().map(|v| rate.ln_phi_exp(v.ln())).collect();
    let violations = g_violations(grid, &ln_psi, &ln_phi);
    let exact = match (rate.family(), psi.family()) {
        (RateFamily::Polynomial { alpha, .. }, PsiFamily::Power { beta }) => {
            Some(*beta >= 0.0 && *beta <= *alpha)
        }
        (_, PsiFamily::Rate(_)) if violations.is_empty() => Some(true),
        _ => None,
    };
    Ok(GReport {
        member: exact.unwrap_or(violations.is_empty()),
        analytic: exact.is_some(),
        violations,
    })
}

// ---------------------------------------------------------------- sequences

struct RateTable {
    rate: RateSpec,
    /// `ln Phi^{-1}(k)` for `k = 0..len`.
    t: RwLock<Vec<f64>>,
}

const TABLE_CAP: usize = 1 << 22;

impl RateTable {
    fn ln_phi1(&self) -> f64 {
        self.rate.ln_phi_exp(0.0)
    }

    /// Extends the table to cover index `k` by solving
    /// `int_{t_k}^{t_{k+1}} e^s/phi(e^s) ds = 1` with a few Newton steps.
    fn extend_to(&self, k: usize) {
        let mut t = self.t.write().expect("rate table lock");
        let h = |s: f64| self.rate.phi_integrand(s);
        while t.len() <= k {
            let t0 = *t.last().expect("table seeded");
            let mut x = t0 + 1.0 / h(t0);
            for _ in 0..8 {
                let err = integrate(&h, t0, x) - 1.0;
                let step = err / h(x);
                x -= step;
                if step.abs() <= 1e-14 * x.abs().max(1.0) {
                    break;
                }
            }
            t.push(x);
        }
    }

    fn ln_eval(&self, k: u64) -> f64 {
        let k = k as usize;
        if k >= TABLE_CAP {
            return self.rate.ln_rate(k as f64).unwrap_or(f64::INFINITY);
        }
        {
            let t = self.t.read().expect("rate table lock");
            if k < t.len() {
                return self.rate.ln_phi_exp(t[k]) - self.ln_phi1();
            }
        }
        self.extend_to(k);
        let t = self.t.read().expect("rate table lock");
        self.rate.ln_phi_exp(t[k]) - self.ln_phi1()
    }
}

#[derive(Clone)]
enum SeqKind {
    Constant,
    Linear,
    Geometric(f64),
    Rate(Arc<RateTable>),
    Custom(Arc<dyn Fn(u64) -> f64 + Send + Sync>),
}

/// A rate sequence `k -> r(k)` with `r(0) = 1`.
#[derive(Clone)]
pub struct SeqSpec {
    name: String,
    kind: SeqKind,
    claims_lambda0: bool,
}

impl fmt::Debug for SeqSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SeqSpec({})", self.name)
    }
}

impl SeqSpec {
    /// `r = 1`.
    pub fn constant() -> Self {
        Self { name: "constant".into(), kind: SeqKind::Constant, claims_lambda0: true }
    }

    /// `r(k) = 1 + k`.
    pub fn linear() -> Self {
        Self { name: "linear".into(), kind: SeqKind::Linear, claims_lambda0: true }
    }

    /// `r(k) = base^k`; not subgeometric, only for submultiplicativity checks.
    pub fn geometric(base: f64) -> Self {
        Self { name: format!("geometric({base})"), kind: SeqKind::Geometric(base), claims_lambda0: false }
    }

    /// `r_phi`, tabulated lazily by the numeric pipeline.
    pub fn from_rate(rate: &RateSpec) -> Self {
        Self {
            name: format!("r_phi[{}]", rate.describe()),
            kind: SeqKind::Rate(Arc::new(RateTable {
                rate: rate.clone(),
                t: RwLock::new(vec![0.0]),
            })),
            claims_lambda0: true,
        }
    }

    pub fn custom(name: &str, r: Arc<dyn Fn(u64) -> f64 + Send + Sync>, claims_lambda0: bool) -> Self {
        Self { name: name.to_string(), kind: SeqKind::Custom(r), claims_lambda0 }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn claims_lambda0(&self) -> bool {
        self.claims_lambda0
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, SeqKind::Constant)
    }

    pub fn eval(&self, k: u64) -> f64 {
        match &self.kind {
            SeqKind::Constant => 1.0,
            SeqKind::Linear => 1.0 + k as f64,
            SeqKind::Geometric(b) => b.powf(k as f64),
            SeqKind::Rate(t) => t.ln_eval(k).exp(),
            SeqKind::Custom(f) => f(k),
        }
    }

    /// `r(0), ..., r(n-1)`.
    pub fn table(&self, n: usize) -> Vec<f64> {
        if let SeqKind::Rate(t) = &self.kind {
            if n > 0 && n <= TABLE_CAP {
                t.extend_to(n - 1);
            }
        }
        (0..n as u64).map(|k| self.eval(k)).collect()
    }

    /// Checks `r(0)=1`, monotonicity and, when membership in `Lambda_0` is
    /// claimed, that `ln r(n)/n` is non-increasing for `1 <= n <= n_check`.
    pub fn validate(&self, n_check: usize) -> Result<()> {
        let r = self.table(n_check + 1);
        if (r[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("{}: r(0) = {} != 1", self.name, r[0])));
        }
        for k in 1..r.len() {
            if r[k] < r[k - 1] * (1.0 - 1e-12) {
                return Err(Error::Argument(format!("{}: decreasing at k={k}", self.name)));
            }
        }
        if self.claims_lambda0 {
            for n in 1..r.len() - 1 {
                let a = r[n].ln() / n as f64;
                let b = r[n + 1].ln() / (n + 1) as f64;
                if b > a + 1e-10 * (1.0 + a.abs()) {
                    return Err(Error::Argument(format!("{}: ln r(n)/n increases at n={n}", self.name)));
                }
            }
        }
        Ok(())
    }
}

/// `max_{0<=n,m<=n_max} r(n+m) / (r(n) r(m))`. Values within `1e-9` of one
/// are reported as exactly one.
pub fn submultiplicativity_constant(seq: &SeqSpec, n_max: usize) -> Result<f64> {
    if n_max < 2 {
        return Err(Error::Argument("n_max must be >= 2".into()));
    }
    let r = seq.table(2 * n_max + 1);
    let mut k: f64 = 1.0;
    for n in 0..=n_max {
        for m in n..=n_max {
            k = k.max(r[n + m] / (r[n] * r[m]));
        }
    }
    Ok(if k < 1.0 + 1e-9 { 1.0 } else { k })
}

/// `N_{r,delta} = sup{n >= 1 : r(n) / sum_{k=1}^n r(k) >= delta}`.
pub fn n_r_delta(seq: &SeqSpec, delta: f64) -> Result<u64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!("delta must lie in (0,1), got {delta}")));
    }
    const WINDOW: u64 = 64;
    const GUARD: u64 = 10_000_000;
    let mut sum = 0.0;
    let mut last = 0;
    let mut below = 0;
    let mut n = 1;
    loop {
        let r = seq.eval(n);
        sum += r;
        if !sum.is_finite() {
            return Err(Error::NotSubgeometric(n));
        }
        if r / sum >= delta {
            last = n;
            below = 0;
        } else {
            below += 1;
            if below >= WINDOW && n >= 2 * last {
                return Ok(last.max(1));
            }
        }
        n += 1;
        if n > GUARD {
            return Err(Error::NotSubgeometric(n));
        }
    }
}
