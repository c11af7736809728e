//! Drift verification and explicit constant assembly.
//!
//! Every constant is stored with the formula that produced it and the inputs
//! it was fed, so a certificate can be audited line by line.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::chain_model::{FiniteChain, Kernel, SmallSetSpec};
use crate::oracle::{exact_w, Exact};
use crate::rate_kit::{h_psi, n_r_delta, submultiplicativity_constant, PsiFamily, PsiSpec, RateFamily, RateSpec, SeqSpec};
use crate::split_sim::{estimate_q_return_moment, MomentEstimate};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CertKind {
    DriftA2,
    LemmaPsiDrift,
    Prop2,
    CorollaryG,
    CorollaryR,
    Thm1Psi,
    Thm1R,
    Thm1Tail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Exact,
    Statistical,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub name: String,
    pub formula: String,
    pub inputs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCertificate {
    pub kind: CertKind,
    pub grade: Grade,
    pub constants: BTreeMap<String, f64>,
    pub provenance: Vec<Provenance>,
}

impl BoundCertificate {
    pub fn new(kind: CertKind, grade: Grade) -> Self {
        Self { kind, grade, constants: BTreeMap::new(), provenance: Vec::new() }
    }

    /// Records `name = value` with its formula; refuses non-finite or
    /// negative values.
    pub fn set(&mut self, name: &str, value: f64, formula: &str, inputs: &[(&str, f64)]) -> Result<f64> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::NonFinite {
                name: name.to_string(),
                detail: format!("{formula} evaluated to {value} with inputs {inputs:?}"),
            });
        }
        self.constants.insert(name.to_string(), value);
        self.provenance.push(Provenance {
            name: name.to_string(),
            formula: formula.to_string(),
            inputs: inputs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
        Ok(value)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.constants.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<f64> {
        self.get(name).ok_or_else(|| Error::Validation(format!("certificate lacks `{name}`")))
    }

    /// Absorbs the constants and provenance of `other`.
    pub fn merge(&mut self, other: &BoundCertificate) {
        for (k, v) in &other.constants {
            self.constants.entry(k.clone()).or_insert(*v);
        }
        self.provenance.extend(other.provenance.iter().cloned());
        if other.grade == Grade::Statistical {
            self.grade = Grade::Statistical;
        }
    }
}

// ---------------------------------------------------------------- drift

/// The scalar data every assembly needs.
#[derive(Debug, Clone)]
pub struct DriftSummary {
    pub epsilon: f64,
    pub b: f64,
    pub rate: RateSpec,
    pub sup_c_v: f64,
    pub sup_c_pv: Option<f64>,
    pub nu_v: f64,
    pub grade: Grade,
}

impl DriftSummary {
    pub fn from_finite(chain: &FiniteChain) -> Self {
        let pv = chain.pv();
        let v = chain.v();
        let c = chain.c();
        Self {
            epsilon: chain.epsilon(),
            b: chain.drift.b,
            rate: chain.drift.rate.clone(),
            sup_c_v: c.iter().map(|&i| v[i]).fold(f64::MIN, f64::max),
            sup_c_pv: Some(c.iter().map(|&i| pv[i]).fold(f64::MIN, f64::max)),
            nu_v: chain.nu().iter().zip(v).map(|(a, b)| a * b).sum(),
            grade: Grade::Exact,
        }
    }

    /// `sup_C QV <= q = (sup_C PV - eps nu(V)) / (1 - eps)`, at least 1.
    /// Without `sup_C PV` the drift bound `sup_C V + b` stands in for it.
    pub fn sup_c_qv(&self) -> f64 {
        let pv = self.sup_c_pv.unwrap_or(self.sup_c_v + self.b);
        if self.epsilon >= 1.0 {
            return self.sup_c_v.max(1.0);
        }
        ((pv - self.epsilon * self.nu_v) / (1.0 - self.epsilon)).max(1.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub holds: bool,
    pub margin: f64,
    /// `(probe point, V - PV - phi(V) + b 1_C)`.
    pub margins: Vec<(f64, f64)>,
    pub grade: Grade,
}

const DRIFT_TOL: f64 = 1e-9;

/// Exact drift check at every state of a finite chain.
pub fn verify_drift(chain: &FiniteChain) -> DriftReport {
    let pv = chain.pv();
    let rate = &chain.drift.rate;
    let margins: Vec<(f64, f64)> = (0..chain.n())
        .map(|i| {
            let v = chain.v()[i];
            let b = if chain.in_c(i) { chain.drift.b } else { 0.0 };
            (i as f64, v - pv[i] - rate.phi(v) + b)
        })
        .collect();
    drift_report(margins, Grade::Exact)
}

/// Drift check from precomputed `(x, V(x), PV(x), in C)` probe values.
pub fn verify_drift_probe(probe: &[(f64, f64, f64, bool)], rate: &RateSpec, b: f64, grade: Grade) -> DriftReport {
    let margins = probe
        .iter()
        .map(|&(x, v, pv, in_c)| (x, v - pv - rate.phi(v) + if in_c { b } else { 0.0 }))
        .collect();
    drift_report(margins, grade)
}

fn drift_report(margins: Vec<(f64, f64)>, grade: Grade) -> DriftReport {
    let margin = margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    DriftReport { holds: margin >= -DRIFT_TOL * (1.0 + margin.abs().min(1.0)), margin, margins, grade }
}

pub fn drift_certificate(summary: &DriftSummary, report: &DriftReport) -> Result<BoundCertificate> {
    if !report.holds {
        return Err(Error::Validation(format!("drift fails with margin {}", report.margin)));
    }
    let mut cert = BoundCertificate::new(CertKind::DriftA2, summary.grade);
    cert.set("b", summary.b, "declared drift constant", &[])?;
    cert.set("epsilon", summary.epsilon, "declared minorisation constant", &[])?;
    cert.set("sup_C V", summary.sup_c_v, "max of V over C", &[])?;
    cert.set("nu(V)", summary.nu_v, "sum_y nu(y) V(y)", &[])?;
    if let Some(p) = summary.sup_c_pv {
        cert.set("sup_C PV", p, "max of PV over C", &[])?;
    }
    cert.set("drift margin", report.margin.max(0.0), "min_x V - PV - phi(V) + b 1_C", &[])?;
    Ok(cert)
}

// ---------------------------------------------------------------- psi drift

/// `b_psi` for the drift `Q H_psi(V) <= H_psi(V) - psi(V) + b_psi 1_C`.
pub fn lemma_psi_drift(summary: &DriftSummary, psi: &PsiSpec) -> Result<BoundCertificate> {
    let mut cert = BoundCertificate::new(CertKind::LemmaPsiDrift, summary.grade);
    let sup_psi = cert.set("sup_C psi(V)", psi.eval(summary.sup_c_v), "psi(sup_C V)", &[("sup_C V", summary.sup_c_v)])?;
    if summary.epsilon >= 1.0 {
        cert.set("b_psi", sup_psi, "sup_C psi(V) (Dirac residual on C)", &[])?;
        return Ok(cert);
    }
    let q = summary.sup_c_qv();
    cert.set("q", q, "max(1, (sup_C PV - eps nu(V)) / (1 - eps))", &[
        ("sup_C PV", summary.sup_c_pv.unwrap_or(summary.sup_c_v + summary.b)),
        ("eps", summary.epsilon),
        ("nu(V)", summary.nu_v),
    ])?;
    let h = h_psi(&summary.rate, psi, q)?;
    cert.set("H_psi(q)", h, "int_1^q psi/phi", &[("q", q)])?;
    cert.set("b_psi", sup_psi + h, "sup_C psi(V) + H_psi(q)", &[("sup_C psi(V)", sup_psi), ("H_psi(q)", h)])?;
    Ok(cert)
}

/// `H_psi(V) - psi(V) + b_psi 1_C - Q H_psi(V)` at every state.
pub fn psi_drift_margins(chain: &FiniteChain, psi: &PsiSpec, b_psi: f64) -> Result<Vec<f64>> {
    let rate = &chain.drift.rate;
    let hv: Vec<f64> = chain.v().iter().map(|&v| h_psi(rate, psi, v)).collect::<Result<_>>()?;
    Ok((0..chain.n())
        .map(|i| {
            let qh = chain.q_row(i).dot(&hv);
            let b = if chain.in_c(i) { b_psi } else { 0.0 };
            hv[i] - psi.eval(chain.v()[i]) + b - qh
        })
        .collect())
}

// ---------------------------------------------------------------- W and the split-moment bound

#[derive(Debug, Clone)]
pub enum WValue {
    Exact(Exact),
    Mc(MomentEstimate),
}

impl WValue {
    pub fn value(&self) -> f64 {
        match self {
            WValue::Exact(e) => e.value,
            WValue::Mc(m) => m.mean,
        }
    }

    /// Conservative upper value: certified remainder or three standard errors.
    pub fn upper(&self) -> f64 {
        match self {
            WValue::Exact(e) => e.upper(),
            WValue::Mc(m) => m.upper(3.0),
        }
    }
}

/// `W_{r,g}(x)` from the oracle.
pub fn w_rg_exact(chain: &FiniteChain, seq: &SeqSpec, g: &[f64], x: usize) -> Result<WValue> {
    Ok(WValue::Exact(exact_w(chain, seq, g, x)?))
}

/// `W_{r,g}(x)` by simulating the residual chain to its first return.
#[allow(clippy::too_many_arguments)]
pub fn w_rg_mc<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    seq: &SeqSpec,
    g: &(dyn Fn(&K::State) -> f64 + Sync),
    x: &K::State,
    reps: usize,
    seed: u64,
    cap: usize,
) -> WValue {
    WValue::Mc(estimate_q_return_moment(kernel, ss, seq, g, x, reps, seed, cap))
}

#[derive(Debug, Clone, Copy)]
pub struct Prop2Inputs {
    pub r0: f64,
    pub g_x: f64,
    pub w_x: f64,
    pub x_in_c: bool,
    pub sup_c_w: f64,
    pub epsilon: f64,
    pub k_sub: f64,
    pub e_r_sigma: f64,
}

/// `r(0) g(x) + W(x) 1_{C^c}(x) + eps^-1 (1-eps) K sup_C W E[r(sigma-check)]`.
pub fn prop2_bound(inp: &Prop2Inputs) -> Result<f64> {
    let tail = if inp.epsilon >= 1.0 {
        0.0
    } else {
        if !inp.sup_c_w.is_finite() {
            return Err(Error::NonFinite { name: "sup_C W".into(), detail: "infinite supremum".into() });
        }
        (1.0 - inp.epsilon) / inp.epsilon * inp.k_sub * inp.sup_c_w * inp.e_r_sigma
    };
    Ok(inp.r0 * inp.g_x + if inp.x_in_c { 0.0 } else { inp.w_x } + tail)
}

pub enum CorollaryCase<'a> {
    /// `r = 1`: gives `b_g`.
    G,
    /// General `r` with tolerance `delta`: gives `b_r`.
    R { seq: &'a SeqSpec, k_sub: f64, delta: f64 },
}

/// Constants of the two corollary bounds given `sup_C W`.
pub fn corollary_constants(epsilon: f64, case: CorollaryCase<'_>, sup_c_w: f64, grade: Grade) -> Result<BoundCertificate> {
    let ratio = if epsilon >= 1.0 { 0.0 } else { (1.0 - epsilon) / epsilon };
    match case {
        CorollaryCase::G => {
            let mut cert = BoundCertificate::new(CertKind::CorollaryG, grade);
            cert.set("b_g", ratio * sup_c_w, "eps^-1 (1-eps) sup_C W_{1,g}", &[("eps", epsilon), ("sup_C W", sup_c_w)])?;
            Ok(cert)
        }
        CorollaryCase::R { seq, k_sub, delta } => {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(Error::Argument(format!("delta must be positive, got {delta}")));
            }
            let mut cert = BoundCertificate::new(CertKind::CorollaryR, grade);
            let a = cert.set("A", ratio * k_sub * sup_c_w, "eps^-1 (1-eps) K sup_C W_{r,1}", &[
                ("eps", epsilon),
                ("K", k_sub),
                ("sup_C W", sup_c_w),
            ])?;
            cert.set("delta", delta, "declared", &[])?;
            let r0 = seq.eval(0);
            if a == 0.0 {
                cert.set("b_r", (1.0 + delta) * r0, "(1+delta) r(0)", &[("r(0)", r0)])?;
                return Ok(cert);
            }
            let dp = cert.set("delta'", delta / ((1.0 + delta) * a), "delta / ((1+delta) A)", &[("delta", delta), ("A", a)])?;
            let n = if dp >= 1.0 { 1 } else { n_r_delta(seq, dp)? };
            cert.set("N_{r,delta'}", n as f64, "sup{n >= 1 : r(n)/sum_{k=1}^n r(k) >= delta'}", &[("delta'", dp)])?;
            let rn = seq.eval(n);
            cert.set("b_r", (1.0 + delta) * (r0 + a * rn), "(1+delta)(r(0) + A r(N_{r,delta'}))", &[
                ("r(0)", r0),
                ("A", a),
                ("r(N)", rn),
            ])?;
            Ok(cert)
        }
    }
}

// ---------------------------------------------------------------- excursion bounds

/// Assembled constants for the psi-moment, the `r_phi`-moment and the tail of
/// the regeneration time, with the rate and envelope they were built for.
#[derive(Debug, Clone)]
pub struct ExcursionBounds {
    pub cert: BoundCertificate,
    pub rate: RateSpec,
    pub psi: PsiSpec,
}

pub fn theorem1_constants(summary: &DriftSummary, psi: &PsiSpec, delta: f64) -> Result<ExcursionBounds> {
    let rate = &summary.rate;
    let eps = summary.epsilon;
    let ratio = if eps >= 1.0 { 0.0 } else { (1.0 - eps) / eps };
    let mut cert = BoundCertificate::new(CertKind::Thm1Tail, summary.grade);
    let lemma = lemma_psi_drift(summary, psi)?;
    cert.merge(&lemma);
    let b_psi = lemma.require("b_psi")?;
    let sup_psi = lemma.require("sup_C psi(V)")?;
    cert.set("B_psi", sup_psi + ratio * b_psi, "sup_C psi(V) + eps^-1 (1-eps) b_psi", &[
        ("sup_C psi(V)", sup_psi),
        ("eps", eps),
        ("b_psi", b_psi),
    ])?;

    let seq = SeqSpec::from_rate(rate);
    let k_sub = cert.set("K_submult", submultiplicativity_constant(&seq, 512)?, "max r(n+m)/(r(n) r(m)), n,m <= 512", &[])?;
    let r1 = seq.eval(1);
    let phi1 = rate.phi(1.0);
    cert.set("r_phi(1)", r1, "phi(Phi^-1(1)) / phi(1)", &[])?;
    cert.set("phi(1)", phi1, "phi(1)", &[])?;
    let q = if eps >= 1.0 { 1.0 } else { summary.sup_c_qv() };
    cert.set("sup_C QV", q, "max(1, (sup_C PV - eps nu(V)) / (1 - eps))", &[])?;
    let sup_w = cert.set("sup_C W_{r,1}", k_sub * r1 * (1.0 + k_sub * r1 * (q - 1.0) / phi1), "K r(1) [1 + K r(1) (sup_C QV - 1) / phi(1)]", &[
        ("K", k_sub),
        ("r(1)", r1),
        ("sup_C QV", q),
        ("phi(1)", phi1),
    ])?;
    let cor = corollary_constants(eps, CorollaryCase::R { seq: &seq, k_sub, delta }, sup_w, summary.grade)?;
    cert.merge(&cor);
    let b_r = cor.require("b_r")?;
    cert.set("B_phi", b_r, "b_r", &[("b_r", b_r)])?;
    let lambda_v = cert.set("lambda_V", (k_sub * r1 / phi1).max(1.0), "max(1, K r(1) / phi(1))", &[])?;

    let rho = cert.set("rho", 1.0 + phi1 * (1.0 + k_sub * r1), "1 + phi(1) (1 + K r(1))", &[])?;
    let kappa0 = cert.set("kappa_0", rho * ((1.0 + delta) * lambda_v + b_r), "rho ((1+delta) lambda_V + B_phi)", &[
        ("rho", rho),
        ("delta", delta),
        ("lambda_V", lambda_v),
        ("B_phi", b_r),
    ])?;
    let h1 = (psi.eval(1.0) / phi1).max(1.0);
    let b_psi_cap = cert.require("B_psi")?;
    let kappa1 = cert.set("kappa_1", h1.max(b_psi_cap), "max(max(1, psi(1)/phi(1)), B_psi)", &[("psi(1)/phi(1)", psi.eval(1.0) / phi1), ("B_psi", b_psi_cap)])?;
    let q2 = (summary.sup_c_v + summary.b).max(q);
    let kappa2 = cert.set("kappa_2", 1.0 + summary.b + ratio * q2, "1 + b + ((1-eps)/eps) max(sup_C V + b, sup_C QV)", &[
        ("b", summary.b),
        ("eps", eps),
        ("sup_C V", summary.sup_c_v),
        ("sup_C QV", q),
    ])?;
    cert.set("kappa", kappa0.max(kappa1 * kappa2), "max(kappa_0, kappa_1 kappa_2)", &[])?;
    cert.set("delta", delta, "declared", &[])?;
    Ok(ExcursionBounds { cert, rate: rate.clone(), psi: psi.clone() })
}

/// Natural-log sum of two log-values.
fn log_sum(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl ExcursionBounds {
    fn c(&self, name: &str) -> f64 {
        self.cert.get(name).expect("assembled constant")
    }

    /// Bound on `E[sum_{k=0}^{sigma-check} psi(V(X_k))]` from `x`.
    pub fn psi_moment_bound(&self, v_x: f64, x_in_c: bool) -> Result<f64> {
        let h = if x_in_c { 0.0 } else { h_psi(&self.rate, &self.psi, v_x)? };
        Ok(h + self.c("B_psi"))
    }

    /// Bound on `E[sum_{k=0}^{sigma-check} r_phi(k)]` from `x`.
    pub fn r_moment_bound(&self, v_x: f64, x_in_c: bool) -> f64 {
        let lead = if x_in_c { 0.0 } else { (1.0 + self.c("delta")) * self.c("lambda_V") * v_x };
        lead + self.c("B_phi")
    }

    /// Natural log of the tail bound
    /// `kappa [1/Phi^-1(cM/psi(K)) + (H_psi(K)+1)/((1-c) M K)] V(x)`.
    pub fn ln_tail_bound(&self, v_x: f64, m: f64, k: f64, c: f64) -> Result<f64> {
        if !(m > 0.0) || !(k >= 1.0) || !(c > 0.0 && c < 1.0) {
            return Err(Error::Argument(format!("tail bound needs M > 0, K >= 1, c in (0,1); got {m}, {k}, {c}")));
        }
        let u = c * m / self.psi.eval(k);
        let t1 = -self.rate.ln_big_phi_inverse(u)?;
        let h = h_psi_fast(&self.rate, &self.psi, k)?;
        let t2 = (h + 1.0).ln() - (1.0 - c).ln() - m.ln() - k.ln();
        Ok(self.c("kappa").ln() + v_x.ln() + log_sum(t1, t2))
    }

    pub fn tail_bound(&self, v_x: f64, m: f64, k: f64, c: f64) -> Result<f64> {
        Ok(self.ln_tail_bound(v_x, m, k, c)?.exp().min(1.0))
    }

    /// Minimises the log tail bound over `ln K` (grid plus
    /// golden-section refinement) and `c in {0.1, ..., 0.9}`.
    pub fn tail_bound_optimized(&self, v_x: f64, m: f64) -> Result<TailOptimum> {
        // ln K* grows like ln M for polynomial rates and like a power of M otherwise.
        let ln_m = m.max(1.0).ln();
        let hi = match self.rate.family() {
            RateFamily::Polynomial { alpha, .. } => ln_m * 2f64.max(1.0 / (1.0 - alpha) + 1.0),
            _ => (2.0 * ln_m).max(m.min(700.0)),
        }
        .max(1e-9);
        let mut best = TailOptimum { ln_bound: f64::INFINITY, k: 1.0, c: 0.5, reference_k: None };
        for ci in 1..=9 {
            let c = ci as f64 / 10.0;
            let f = |lk: f64| self.ln_tail_bound(v_x, m, lk.exp(), c).unwrap_or(f64::INFINITY);
            let n = 256;
            let grid: Vec<f64> = (0..=n).map(|i| hi * i as f64 / n as f64).collect();
            let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
            let i = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("non-empty grid");
            let (mut a, mut b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(n)]);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            let mut x1 = b - g * (b - a);
            let mut x2 = a + g * (b - a);
            let (mut f1, mut f2) = (f(x1), f(x2));
            for _ in 0..60 {
                if f1 <= f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - g * (b - a);
                    f1 = f(x1);
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + g * (b - a);
                    f2 = f(x2);
                }
                if b - a < 1e-10 * hi.max(1.0) {
                    break;
                }
            }
            let (lk, lv) = [(grid[i], vals[i]), (x1, f1), (x2, f2)]
                .into_iter()
                .min_by(|p, q| p.1.total_cmp(&q.1))
                .expect("candidates");
            if lv < best.ln_bound {
                best = TailOptimum { ln_bound: lv, k: lk.exp(), c, reference_k: None };
            }
        }
        if let (RateFamily::Polynomial { alpha, .. }, PsiFamily::Power { beta }) = (self.rate.family(), self.psi.family()) {
            best.reference_k = Some(m.powf(alpha / (beta + (alpha - beta) * (1.0 - alpha))));
        }
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TailOptimum {
    pub ln_bound: f64,
    pub k: f64,
    pub c: f64,
    /// `M^{alpha/(beta + (alpha-beta)(1-alpha))}` for power families.
    pub reference_k: Option<f64>,
}

impl TailOptimum {
    pub fn bound(&self) -> f64 {
        self.ln_bound.exp().min(1.0)
    }
}

/// `H_psi(v)` in closed form for power envelopes against polynomial rates.
pub fn h_psi_fast(rate: &RateSpec, psi: &PsiSpec, v: f64) -> Result<f64> {
    if let (RateFamily::Polynomial { c, alpha }, PsiFamily::Power { beta }) = (rate.family(), psi.family()) {
        let e = 1.0 + beta - alpha;
        return Ok(if e.abs() < 1e-12 { v.ln() / c } else { (v.powf(e) - 1.0) / (e * c) });
    }
    h_psi(rate, psi, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::build_finite_fixture;

    #[test]
    fn prop2_with_sure_head_drops_tail_term() {
        let b = prop2_bound(&Prop2Inputs { r0: 1.0, g_x: 2.0, w_x: 3.0, x_in_c: false, sup_c_w: 1e9, epsilon: 1.0, k_sub: 1.0, e_r_sigma: 5.0 }).unwrap();
        assert_eq!(b, 5.0);
    }

    #[test]
    fn b_g_vanishes_for_sure_head() {
        let c = corollary_constants(1.0, CorollaryCase::G, 7.0, Grade::Exact).unwrap();
        assert_eq!(c.get("b_g"), Some(0.0));
    }

    #[test]
    fn b_r_constant_sequence_example() {
        let seq = SeqSpec::constant();
        let c = corollary_constants(0.5, CorollaryCase::R { seq: &seq, k_sub: 1.0, delta: 0.5 }, 1.0, Grade::Exact).unwrap();
        assert!((c.get("delta'").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.get("N_{r,delta'}"), Some(3.0));
        assert!((c.get("b_r").unwrap() - 1.5 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn three_state_drift_holds_and_fails_without_b() {
        let e = build_finite_fixture("three-state-default").unwrap();
        let ch = e.finite().unwrap();
        let rep = verify_drift(ch);
        assert!(rep.holds, "{rep:?}");
        let mut broken = ch.clone();
        broken.drift.b = 1e-9;
        assert!(!verify_drift(&broken).holds);
    }

    #[test]
    fn non_finite_constant_is_refused() {
        let mut c = BoundCertificate::new(CertKind::Prop2, Grade::Exact);
        assert!(c.set("x", f64::INFINITY, "oops", &[]).is_err());
    }
}
