//! The studies behind `subgeo run`.

use std::sync::Arc;

use serde::Serialize;

use super::config::{ExperimentConfig, SpeedConfig, Study};
use super::svg::Plot;
use crate::bound_engine::{theorem1_constants, BoundCertificate, ExcursionBounds};
use crate::chain_model::{FiniteChain, Initial, Kernel, SmallSetSpec};
use crate::limit_lab::{
    berry_esseen_empirical, berry_esseen_gate, clt_gate, deviation_empirical, mdp_empirical, mdp_speed_gate, sigma2_exact, sigma2_poisson,
    sigma2_regeneration, DeviationBound, GateReport, MdpMode, SpeedSpec,
};
use crate::model_zoo::{ZooEntry, ZooModel};
use crate::oracle::{exact_split_moment, exact_split_moment_at, exact_stationary, key_relation, return_time_series, stationary_residual};
use crate::rate_kit::{log_grid, PsiSpec, RateFamily, RateSpec, SeqSpec};
use crate::rng::derive_seed;
use crate::split_sim::{estimate_modulated_moment, estimate_tail, MomentEstimate, Start};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub study: &'static str,
    pub parameter: String,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

pub struct StudyOutput {
    pub study: Study,
    pub rows: Vec<Row>,
    pub certificates: Vec<(String, BoundCertificate)>,
    pub plot: Plot,
    /// Bounds found below an estimate by more than 3 standard errors.
    pub violations: Vec<String>,
    /// Exact identities outside tolerance.
    pub failures: Vec<String>,
}

impl StudyOutput {
    fn new(study: Study, plot: Plot) -> Self {
        Self { study, rows: Vec::new(), certificates: Vec::new(), plot, violations: Vec::new(), failures: Vec::new() }
    }

    fn push(&mut self, parameter: impl Into<String>, value: f64) {
        self.rows.push(Row { study: self.study.name(), parameter: parameter.into(), value, ci_low: None, ci_high: None });
    }

    fn push_ci(&mut self, parameter: impl Into<String>, value: f64, lo: f64, hi: f64) {
        self.rows.push(Row { study: self.study.name(), parameter: parameter.into(), value, ci_low: Some(lo), ci_high: Some(hi) });
    }

    fn push_estimate(&mut self, parameter: impl Into<String>, e: &MomentEstimate) {
        self.push_ci(parameter, e.mean, e.lower(1.96), e.upper(1.96));
    }

    fn dominance(&mut self, label: &str, bound: f64, estimate: f64, se: f64) {
        let floor = if se > 0.0 { estimate - 3.0 * se } else { estimate * (1.0 - 1e-12) };
        if bound < floor {
            self.violations.push(format!("{label}: bound {bound:e} below estimate {estimate:e} (se {se:e})"));
        }
    }

    fn check(&mut self, label: &str, error: f64, tol: f64) {
        self.push(format!("{label} error"), error);
        if !(error <= tol) {
            self.failures.push(format!("{label}: error {error:e} above {tol:e}"));
        }
    }

    fn gate(&mut self, label: &str, report: &GateReport) {
        self.push(format!("{label} pass"), f64::from(u8::from(report.pass)));
        for c in &report.conditions {
            self.push(format!("{label} [{}] {} pass", c.method, c.name), f64::from(u8::from(c.pass)));
        }
    }
}

pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub entry: &'a ZooEntry,
    pub seed: u64,
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn probe_states(n: usize) -> Vec<usize> {
    if n <= 12 {
        return (0..n).collect();
    }
    let mut v: Vec<usize> = [0usize, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000].into_iter().filter(|&x| x < n).collect();
    v.push(n - 1);
    v.dedup();
    v
}

/// `(n/b_n^2)`-type speeds from the config.
fn speed_of(s: &SpeedConfig) -> SpeedSpec {
    SpeedSpec::power_log(s.a, s.p)
}

impl<'a> Ctx<'a> {
    fn rate(&self) -> RateSpec {
        self.entry.summary().rate
    }

    fn psi(&self) -> Result<PsiSpec> {
        let rate = self.rate();
        match &self.cfg.psi {
            Some(p) => p.build(&rate),
            None => match rate.family() {
                // Largest power the limit-theorem composites admit, capped at 0.3.
                RateFamily::Polynomial { alpha, .. } => PsiSpec::power(match self.cfg.study {
                    Study::Clt | Study::Mdp => (alpha - 0.5).clamp(0.0, 0.3),
                    Study::BerryEsseen => ((3.0 * alpha - 2.0) / 3.0).clamp(0.0, 0.3),
                    _ => (0.5 * alpha).min(0.3),
                }),
                RateFamily::LogPerturbed { d, .. } => {
                    let beta = if self.cfg.study == Study::BerryEsseen { 0.5 } else { 1.0 };
                    PsiSpec::log_power_shifted(beta, d.max(1.0))
                }
                RateFamily::Custom { .. } => Ok(PsiSpec::constant()),
            },
        }
    }

    fn delta(&self) -> f64 {
        self.cfg.delta.unwrap_or(0.5)
    }

    fn cap(&self) -> usize {
        self.cfg.cap.unwrap_or(10_000_000)
    }

    fn sub(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag)
    }

    fn finite(&self) -> Result<&'a FiniteChain> {
        self.entry
            .finite()
            .ok_or_else(|| Error::Validation(format!("the {} study needs a finite chain; `{}` is not one", self.cfg.study.name(), self.entry.name)))
    }

    /// Excursion-bound constants with the test hook applied.
    fn theorem1(&self, psi: &PsiSpec) -> Result<ExcursionBounds> {
        let mut t = theorem1_constants(&self.entry.summary(), psi, self.delta())?;
        if let Some(h) = &self.cfg.test_hook {
            let v = t
                .cert
                .constants
                .get_mut(&h.corrupt_constant)
                .ok_or_else(|| Error::Validation(format!("test hook names unknown constant `{}`", h.corrupt_constant)))?;
            *v *= h.factor;
        }
        Ok(t)
    }

    fn finite_f(&self, ch: &FiniteChain) -> Result<Vec<f64>> {
        match &self.cfg.f {
            Some(f) if f.len() != ch.n() => Err(Error::Validation(format!("`f` has length {} but the chain has {} states", f.len(), ch.n()))),
            Some(f) => Ok(f.clone()),
            None => Ok((0..ch.n()).map(|i| f64::from(u8::from(ch.in_c(i)))).collect()),
        }
    }

    fn finite_x0(&self, ch: &FiniteChain) -> Result<usize> {
        match self.cfg.x0 {
            None => Ok(ch.c()[0]),
            Some(x) if x >= 0.0 && x.fract() == 0.0 && (x as usize) < ch.n() => Ok(x as usize),
            Some(x) => Err(Error::Validation(format!("`x0` = {x} is not a state index below {}", ch.n()))),
        }
    }

    fn real_x0(&self) -> Result<f64> {
        match self.cfg.x0 {
            None => Ok(0.0),
            Some(x) if x >= 0.0 && x.is_finite() => Ok(x),
            Some(x) => Err(Error::Validation(format!("`x0` = {x} is outside [0, inf)"))),
        }
    }
}

pub fn run_study(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    match ctx.cfg.study {
        Study::Rates => rates(ctx),
        Study::Bounds => bounds(ctx),
        Study::Tail => tail(ctx),
        Study::Clt => clt(ctx),
        Study::BerryEsseen => berry_esseen(ctx),
        Study::Mdp => mdp(ctx),
        Study::Deviation => deviation(ctx),
        Study::VerifyAll => verify_all(ctx),
    }
}

// ---------------------------------------------------------------- rates

fn rates(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    let rate = ctx.rate();
    let seq = SeqSpec::from_rate(&rate);
    let ks = ctx.cfg.k_grid.clone().unwrap_or_else(|| vec![0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000]);
    let mut out = StudyOutput::new(Study::Rates, Plot::new(&format!("r_phi(k) for {}", rate.describe()), "k", "r_phi(k)", true, true));
    let closed = match rate.family() {
        RateFamily::Polynomial { c, alpha } => {
            let (c, a) = (*c, *alpha);
            Some(move |k: f64| (1.0 + c * (1.0 - a) * k).powf(a / (1.0 - a)))
        }
        _ => None,
    };
    let mut num = Vec::new();
    let mut cf = Vec::new();
    for &k in &ks {
        let r = seq.eval(k);
        out.push(format!("r_phi k={k}"), r);
        num.push((k as f64, r));
        if let Some(f) = &closed {
            let e = f(k as f64);
            out.push(format!("r_phi closed form k={k}"), e);
            out.check(&format!("r_phi relative k={k}"), ((r - e) / e).abs(), 1e-8);
            cf.push((k as f64, e));
        }
    }
    for u in log_grid(1e-3, 1e6, 10) {
        let v = rate.big_phi_inverse(u)?;
        let back = rate.big_phi(v)?;
        out.check(&format!("Phi round trip u={u:.6e}"), ((back - u) / u).abs(), 1e-8);
    }
    out.plot.add("numeric", num, false);
    if !cf.is_empty() {
        out.plot.add("closed form", cf, true);
    }
    Ok(out)
}

// ---------------------------------------------------------------- bounds

fn mc_moments<K: Kernel>(
    kernel: &K,
    ss: &SmallSetSpec<K::State>,
    g: &(dyn Fn(&K::State) -> f64 + Sync),
    seq_r: &SeqSpec,
    x: &K::State,
    reps: usize,
    seed: u64,
    cap: usize,
) -> Result<(MomentEstimate, MomentEstimate)>
where
    K::State: 'static,
{
    let start = Start::point(x.clone());
    let psi_m = estimate_modulated_moment(kernel, ss, &SeqSpec::constant(), g, &start, reps, derive_seed(seed, 1), cap)?;
    let r_m = estimate_modulated_moment(kernel, ss, seq_r, &|_| 1.0, &start, reps, derive_seed(seed, 2), cap)?;
    Ok((psi_m, r_m))
}

fn bounds(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    let psi = ctx.psi()?;
    let t = ctx.theorem1(&psi)?;
    let reps = ctx.cfg.reps.unwrap_or(20_000);
    let seq_r = SeqSpec::from_rate(&t.rate);
    let mut out = StudyOutput::new(Study::Bounds, Plot::new("Excursion moments", "V(x)", "moment", true, true));
    out.certificates.push(("excursion".into(), t.cert.clone()));
    let mut curves: [Vec<(f64, f64)>; 6] = Default::default();
    match &ctx.entry.model {
        ZooModel::Finite(ch) => {
            let g: Vec<f64> = ch.v().iter().map(|&v| psi.eval(v)).collect();
            let ones = vec![1.0; ch.n()];
            for x in probe_states(ch.n()) {
                let (vx, inc) = (ch.v()[x], ch.in_c(x));
                let pb = t.psi_moment_bound(vx, inc)?;
                let rb = t.r_moment_bound(vx, inc);
                let pe = exact_split_moment_at(ch, &SeqSpec::constant(), &g, x)?;
                let re = exact_split_moment_at(ch, &seq_r, &ones, x)?;
                let gf = |s: &usize| g[*s];
                let (pm, rm) = mc_moments(&ch.kernel, &ch.small_set, &gf, &seq_r, &x, reps, ctx.sub(x as u64), ctx.cap())?;
                out.push(format!("psi moment bound x={x}"), pb);
                out.push_ci(format!("psi moment exact x={x}"), pe.value, pe.value, pe.upper());
                out.push_estimate(format!("psi moment mc x={x}"), &pm);
                out.push(format!("r moment bound x={x}"), rb);
                out.push_ci(format!("r moment exact x={x}"), re.value, re.value, re.upper());
                out.push_estimate(format!("r moment mc x={x}"), &rm);
                out.dominance(&format!("psi moment exact x={x}"), pb, pe.upper(), 0.0);
                out.dominance(&format!("r moment exact x={x}"), rb, re.upper(), 0.0);
                out.dominance(&format!("psi moment mc x={x}"), pb, pm.mean, pm.std_error);
                out.dominance(&format!("r moment mc x={x}"), rb, rm.mean, rm.std_error);
                for (c, y) in curves.iter_mut().zip([pb, pe.value, pm.mean, rb, re.value, rm.mean]) {
                    c.push((vx, y));
                }
            }
        }
        ZooModel::Real(m) => {
            let xs = [0.0, m.spec.c0, 2.0, 5.0, 10.0, 20.0];
            for (i, &x) in xs.iter().enumerate() {
                let (vx, inc) = (m.drift.v(&x), m.small_set.contains(&x));
                let pb = t.psi_moment_bound(vx, inc)?;
                let rb = t.r_moment_bound(vx, inc);
                let drift = &m.drift;
                let gf = |s: &f64| psi.eval(drift.v(s));
                let (pm, rm) = mc_moments(&m.kernel, &m.small_set, &gf, &seq_r, &x, reps, ctx.sub(i as u64), ctx.cap())?;
                out.push(format!("psi moment bound x={x}"), pb);
                out.push_estimate(format!("psi moment mc x={x}"), &pm);
                out.push(format!("r moment bound x={x}"), rb);
                out.push_estimate(format!("r moment mc x={x}"), &rm);
                out.dominance(&format!("psi moment mc x={x}"), pb, pm.mean, pm.std_error);
                out.dominance(&format!("r moment mc x={x}"), rb, rm.mean, rm.std_error);
                for (c, y) in curves.iter_mut().zip([pb, f64::NAN, pm.mean, rb, f64::NAN, rm.mean]) {
                    c.push((vx, y));
                }
            }
        }
    }
    let names = ["psi bound", "psi exact", "psi mc", "r bound", "r exact", "r mc"];
    for (i, (n, c)) in names.iter().zip(curves).enumerate() {
        if c.iter().any(|p| p.1.is_finite()) {
            out.plot.add(n, c, i % 3 == 0);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- tail

fn tail(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    let psi = ctx.psi()?;
    let t = ctx.theorem1(&psi)?;
    let reps = ctx.cfg.reps.unwrap_or(100_000);
    let grid = ctx.cfg.m_grid.clone().unwrap_or_else(|| log_grid(10.0, 1e6, 21));
    let mut out = StudyOutput::new(Study::Tail, Plot::new(&format!("Tail of the excursion sum of {}", psi.describe()), "M", "probability", true, true));
    out.certificates.push(("excursion".into(), t.cert.clone()));
    let (est, v0) = match &ctx.entry.model {
        ZooModel::Finite(ch) => {
            let x0 = ctx.finite_x0(ch)?;
            let w = |s: &usize| psi.eval(ch.v()[*s]);
            (estimate_tail(&ch.kernel, &ch.small_set, &w, &grid, &Start::point(x0), reps, ctx.seed, ctx.cap())?, ch.v()[x0])
        }
        ZooModel::Real(m) => {
            let x0 = ctx.real_x0()?;
            let drift = &m.drift;
            let w = |s: &f64| psi.eval(drift.v(s));
            (estimate_tail(&m.kernel, &m.small_set, &w, &grid, &Start::point(x0), reps, ctx.seed, ctx.cap())?, drift.v(&x0))
        }
    };
    out.push("censored cycles", est.censored as f64);
    let (mut bc, mut ec) = (Vec::new(), Vec::new());
    for p in &est.points {
        let o = t.tail_bound_optimized(v0, p.m)?;
        out.push(format!("tail bound M={}", p.m), o.bound());
        out.push(format!("tail bound K M={}", p.m), o.k);
        out.push(format!("tail bound c M={}", p.m), o.c);
        out.push_ci(format!("tail empirical M={}", p.m), p.p_hat, p.ci_low, p.ci_high);
        out.dominance(&format!("tail M={}", p.m), o.bound(), p.p_hat, p.std_error);
        bc.push((p.m, o.bound()));
        ec.push((p.m, p.p_hat));
    }
    out.plot.add("bound", bc, true);
    out.plot.add("empirical", ec, false);
    Ok(out)
}

// ---------------------------------------------------------------- clt

fn gate_or_fail(out: &mut StudyOutput, label: &str, r: Result<GateReport>) {
    match r {
        Ok(g) => out.gate(label, &g),
        Err(Error::Argument(_)) => out.push(format!("{label} pass"), 0.0),
        Err(e) => out.failures.push(format!("{label}: {e}")),
    }
}

/// `(pi_f, sigma^2)` exactly for finite chains, from regeneration otherwise.
fn mean_and_variance(ctx: &Ctx<'_>, out: &mut StudyOutput, f_fin: Option<&[f64]>) -> Result<(f64, f64)> {
    // Centering error in pi(f) is magnified by sqrt(n) downstream.
    let blocks = ctx.cfg.blocks.unwrap_or(1_000_000);
    match &ctx.entry.model {
        ZooModel::Finite(ch) => {
            let f = f_fin.expect("finite f");
            let ex = sigma2_exact(ch, f, 1e-12)?;
            out.push("sigma2 exact", ex.sigma2);
            out.push("sigma2 exact remainder", ex.remainder.unwrap_or(0.0));
            out.push("pi(f)", ex.pi_f);
            Ok((ex.pi_f, ex.sigma2))
        }
        ZooModel::Real(m) => {
            let ss = &m.small_set;
            let f = |x: &f64| f64::from(u8::from(ss.contains(x)));
            let r = sigma2_regeneration(&m.kernel, ss, &f, blocks, ctx.sub(0x5157), ctx.cap())?;
            let se = r.std_error.unwrap_or(0.0);
            out.push_ci("sigma2 regeneration", r.sigma2, r.sigma2 - 1.96 * se, r.sigma2 + 1.96 * se);
            out.push("pi(f) regeneration", r.pi_f);
            Ok((r.pi_f, r.sigma2))
        }
    }
}

fn clt(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    let psi = ctx.psi()?;
    let rate = ctx.rate();
    let mut out = StudyOutput::new(Study::Clt, Plot::new("Asymptotic variance", "blocks", "sigma^2", true, false));
    gate_or_fail(&mut out, &format!("clt gate psi={}", psi.describe()), clt_gate(&rate, &psi));
    let blocks = ctx.cfg.blocks.unwrap_or(20_000);
    let counts: Vec<usize> = [16, 8, 4, 2, 1].iter().map(|d| (blocks / d).max(30)).collect();
    let seed = ctx.sub(0xC17);
    let (ests, exact) = match &ctx.entry.model {
        ZooModel::Finite(ch) => {
            let f = ctx.finite_f(ch)?;
            let (_, s2) = mean_and_variance(ctx, &mut out, Some(&f))?;
            let pois = sigma2_poisson(ch, &f)?;
            out.push("sigma2 poisson", pois);
            out.check("sigma2 series vs poisson", (s2 - pois).abs() / s2.abs().max(1e-300), 1e-8);
            let ff = |x: &usize| f[*x];
            let e = counts.iter().map(|&n| sigma2_regeneration(&ch.kernel, &ch.small_set, &ff, n, seed, ctx.cap())).collect::<Result<Vec<_>>>()?;
            (e, Some(s2))
        }
        ZooModel::Real(m) => {
            let ss = &m.small_set;
            let ff = |x: &f64| f64::from(u8::from(ss.contains(x)));
            let e = counts.iter().map(|&n| sigma2_regeneration(&m.kernel, ss, &ff, n, seed, ctx.cap())).collect::<Result<Vec<_>>>()?;
            (e, None)
        }
    };
    let mut curve = Vec::new();
    for e in &ests {
        let n = e.blocks.unwrap_or(0);
        let se = e.std_error.unwrap_or(0.0);
        out.push_ci(format!("sigma2 regeneration blocks={n}"), e.sigma2, e.sigma2 - 1.96 * se, e.sigma2 + 1.96 * se);
        curve.push((n as f64, e.sigma2));
    }
    if let (Some(s2), Some(last)) = (exact, ests.last()) {
        out.push("sigma2 regeneration z-score", (last.sigma2 - s2) / last.std_error.unwrap_or(f64::NAN));
        out.plot.add("exact", curve.iter().map(|p| (p.0, s2)).collect(), true);
    }
    out.plot.add("regeneration", curve, false);
    Ok(out)
}

// ---------------------------------------------------------------- berry-esseen

fn berry_esseen(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    let psi = ctx.psi()?;
    let mut out = StudyOutput::new(Study::BerryEsseen, Plot::new("sqrt(n) x sup-CDF distance", "n", "sqrt(n) d_n", true, false));
    gate_or_fail(&mut out, &format!("berry-esseen gate psi={}", psi.describe()), berry_esseen_gate(&ctx.rate(), &psi));
    let n_grid = ctx.cfg.n_grid.clone().unwrap_or_else(|| (6..=12).map(|k| 1usize << k).collect());
    let reps = ctx.cfg.reps.unwrap_or(10_000);
    let n_boot = ctx.cfg.n_boot.unwrap_or(200);
    let rep = match &ctx.entry.model {
        ZooModel::Finite(ch) => {
            let f = ctx.finite_f(ch)?;
            let (pi_f, s2) = mean_and_variance(ctx, &mut out, Some(&f))?;
            let ff = |x: &usize| f[*x];
            berry_esseen_empirical(&ch.kernel, &ctx.finite_x0(ch)?, &ff, pi_f, s2.sqrt(), &n_grid, reps, n_boot, ctx.seed)?
        }
        ZooModel::Real(m) => {
            let (pi_f, s2) = mean_and_variance(ctx, &mut out, None)?;
            let ss = &m.small_set;
            let ff = |x: &f64| f64::from(u8::from(ss.contains(x)));
            berry_esseen_empirical(&m.kernel, &ctx.real_x0()?, &ff, pi_f, s2.sqrt(), &n_grid, reps, n_boot, ctx.seed)?
        }
    };
    for p in &rep.points {
        out.push(format!("sup distance n={}", p.n), p.distance);
        out.push(format!("sqrt(n) sup distance n={}", p.n), p.scaled);
    }
    out.push("kappa hat", rep.kappa_hat);
    out.push_ci("trend slope in ln n", rep.slope, rep.slope_ci.0, rep.slope_ci.1);
    out.push("no upward trend", f64::from(u8::from(rep.no_upward_trend)));
    out.plot.add("sqrt(n) d_n", rep.points.iter().map(|p| (p.n as f64, p.scaled)).collect(), false);
    Ok(out)
}

// ---------------------------------------------------------------- mdp

fn mdp(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    let rate = ctx.rate();
    // The first speed drives the simulation, so it sits inside the window.
    let speeds = ctx.cfg.speeds.clone().unwrap_or_else(|| {
        let sp = |a, p| SpeedConfig { a, p };
        match rate.family() {
            RateFamily::Polynomial { .. } => vec![sp(0.5, 0.25), sp(0.5, 0.0), sp(0.5, 1.5), sp(0.6, 0.0)],
            _ => vec![sp(0.6, 0.0), sp(0.7, 0.0), sp(0.5, 0.0)],
        }
    });
    let mut out = StudyOutput::new(Study::Mdp, Plot::new("Normalised log-probability", "n", "(n/b_n^2) log P", true, false));
    for s in &speeds {
        let sp = speed_of(s);
        let g = mdp_speed_gate(&rate, &sp, &MdpMode::Bounded)?;
        out.gate(&format!("mdp gate b_n={}", sp.describe()), &g);
    }
    let speed = speed_of(&speeds[0]);
    let n_grid = ctx.cfg.n_grid.clone().unwrap_or_else(|| vec![1000, 4000, 16000]);
    let reps = ctx.cfg.reps.unwrap_or(2000);
    let seed = ctx.sub(0x3D9);
    let points = match &ctx.entry.model {
        ZooModel::Finite(ch) => {
            let ind: Vec<f64> = (0..ch.n()).map(|i| f64::from(u8::from(ch.in_c(i)))).collect();
            let (pi_c, s2) = mean_and_variance(ctx, &mut out, Some(&ind))?;
            let x = ctx.cfg.mdp_x.unwrap_or(s2.sqrt());
            let f = |s: &usize| ind[*s] - pi_c;
            let mu = Initial::Point(ctx.finite_x0(ch)?);
            mdp_empirical(&ch.kernel, &ch.small_set, &mu, &f, &speed, &n_grid, x, s2, ch.epsilon() * pi_c, reps, seed)?
        }
        ZooModel::Real(m) => {
            let (pi_c, s2) = mean_and_variance(ctx, &mut out, None)?;
            let x = ctx.cfg.mdp_x.unwrap_or(s2.sqrt());
            let ss = &m.small_set;
            let f = |s: &f64| f64::from(u8::from(ss.contains(s))) - pi_c;
            let mu = Initial::Point(ctx.real_x0()?);
            mdp_empirical(&m.kernel, ss, &mu, &f, &speed, &n_grid, x, s2, ss.epsilon() * pi_c, reps, seed)?
        }
    };
    let (mut emp, mut tgt) = (Vec::new(), Vec::new());
    for p in &points {
        let n = p.n;
        out.push(format!("normalised log-probability n={n}{}", if p.one_sided { " (upper)" } else { "" }), p.normalized);
        out.push(format!("rate target n={n}"), p.target);
        out.push(format!("p hat n={n}"), p.p_hat);
        out.push_ci(format!("mean i(n) n={n}"), p.mean_i_n, p.mean_i_n - 1.96 * p.se_i_n, p.mean_i_n + 1.96 * p.se_i_n);
        out.push(format!("e(n) n={n}"), p.e_n as f64);
        for (name, v) in ["head", "tail", "count gap"].iter().zip(p.negligibility) {
            out.push(format!("P(|{name}| >= 0.1 b_n) n={n}"), v);
        }
        out.check(&format!("block decomposition n={n}"), p.max_identity_error, 1e-9 * (1.0 + 2.0 * n as f64));
        emp.push((n as f64, p.normalized));
        tgt.push((n as f64, p.target));
    }
    out.plot.add("empirical", emp, false);
    out.plot.add("-x^2/(2 sigma^2)", tgt, true);
    Ok(out)
}

// ---------------------------------------------------------------- deviation

const DEVIATION_MAX_N: f64 = 5e7;

/// `E_nu[(sigma-check + 1)^2]` as a split moment with `r(k) = 2k + 1`.
pub fn split_second_moment(ch: &FiniteChain) -> Result<f64> {
    let seq = SeqSpec::custom("2k+1", Arc::new(|k| 2.0 * k as f64 + 1.0), false);
    Ok(exact_split_moment(ch, &seq, &vec![1.0; ch.n()], ch.nu())?.upper())
}

/// Bound slope in `n` over `[1e40, 1e60]` at `eps = 0.5`.
pub fn deviation_slope(d: &DeviationBound) -> Result<f64> {
    let ns: Vec<f64> = (0..=20).map(|i| 10f64.powi(40 + i)).collect();
    let ys = ns.iter().map(|&n| Ok(d.optimized(n, 0.5)?.ln_bound)).collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    Ok(ols_slope(&xs, &ys))
}

fn deviation(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    let ch = ctx.finite()?;
    let pi = exact_stationary(ch)?;
    let pi_c: f64 = ch.c().iter().map(|&i| pi[i]).sum();
    let f: Vec<f64> = (0..ch.n()).map(|i| f64::from(u8::from(ch.in_c(i))) - pi_c).collect();
    let f_sup = f.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let t = ctx.theorem1(&PsiSpec::constant())?;
    let x0 = ctx.finite_x0(ch)?;
    let d = DeviationBound::new(&t, ch.v()[x0], ch.in_c(x0), split_second_moment(ch)?, f_sup)?;
    let eps_grid = ctx.cfg.eps_grid.clone().unwrap_or_else(|| vec![0.3, 0.4, 0.5, 0.6]);
    let mults = ctx.cfg.n_multipliers.clone().unwrap_or_else(|| vec![1.0, 1.5, 2.0, 3.0, 4.0, 6.0]);
    let reps = ctx.cfg.reps.unwrap_or(200);
    let mut out = StudyOutput::new(Study::Deviation, Plot::new("P(|S_n| > eps n)", "n", "probability", true, true));
    let pairs: Vec<(f64, usize)> = eps_grid
        .iter()
        .flat_map(|&e| mults.iter().map(move |&m| (e, m)))
        .map(|(e, m)| (e, (d.n0(e) * m.max(1.0)).ceil() as usize))
        .collect();
    let mut ns: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    ns.sort_unstable();
    ns.dedup();
    if *ns.last().expect("non-empty") as f64 > DEVIATION_MAX_N {
        return Err(Error::Validation(format!("horizon {} exceeds the simulation limit {DEVIATION_MAX_N:e}", ns.last().expect("non-empty"))));
    }
    for &e in &eps_grid {
        out.push(format!("n0 eps={e}"), d.n0(e).ceil());
    }
    let ff = |s: &usize| f[*s];
    let emp = deviation_empirical(&ch.kernel, &x0, &ff, &ns, &eps_grid, reps, ctx.seed)?;
    for &e in &eps_grid {
        let (mut bc, mut ec) = (Vec::new(), Vec::new());
        for &(_, n) in pairs.iter().filter(|p| p.0 == e) {
            let b = d.optimized(n as f64, e)?;
            let p = emp.iter().find(|p| p.n == n && p.eps == e).expect("simulated pair");
            out.push(format!("deviation bound n={n} eps={e}"), b.bound());
            out.push_ci(format!("deviation empirical n={n} eps={e}"), p.p_hat, (p.p_hat - 1.96 * p.std_error).max(0.0), p.p_hat + 1.96 * p.std_error);
            out.dominance(&format!("deviation n={n} eps={e}"), b.bound(), p.p_hat, p.std_error);
            bc.push((n as f64, b.bound()));
            ec.push((n as f64, p.p_hat));
        }
        out.plot.add(&format!("bound eps={e}"), bc, true);
        out.plot.add(&format!("empirical eps={e}"), ec, false);
    }
    out.push("bound slope in n (eps=0.5, n in [1e40,1e60])", deviation_slope(&d)?);
    if let RateFamily::Polynomial { alpha, .. } = t.rate.family() {
        out.push("bound slope target", -alpha / (1.0 - alpha));
    }
    out.certificates.push(("deviation".into(), d.cert.clone()));
    Ok(out)
}

// ---------------------------------------------------------------- verify-all

/// Largest horizon keeping split-path enumeration below `budget` paths.
fn enumeration_horizon(n: usize, budget: f64) -> usize {
    let branch = (2 * n) as f64;
    ((budget.ln() / branch.ln()).floor() as usize).clamp(1, 12)
}

fn verify_all(ctx: &Ctx<'_>) -> Result<StudyOutput> {
    let ch = ctx.finite()?;
    let n = ch.n();
    let mut out = StudyOutput::new(Study::VerifyAll, Plot::new("Excursion moment bounds against exact moments", "V(x)", "moment", true, true));
    let rep = &ctx.entry.report;
    out.push("drift margin", rep.margin);
    if !rep.holds {
        out.failures.push(format!("drift condition fails with margin {}", rep.margin));
    }
    let eps = ch.epsilon();
    let mut a1 = f64::INFINITY;
    for &x in ch.c() {
        for (j, &nu) in ch.nu().iter().enumerate() {
            a1 = a1.min(ch.p_row(x).get(j) - eps * nu);
        }
    }
    out.push("minorisation min residual", a1);
    if a1 < -1e-15 {
        out.failures.push(format!("minorisation fails by {a1:e}"));
    }
    let pi = exact_stationary(ch)?;
    out.check("stationary residual", stationary_residual(ch, &pi), 1e-12);

    let g = ch.v().to_vec();
    if n <= 6 {
        let h = enumeration_horizon(n, 2e6);
        let mut laws = vec![ch.nu().to_vec()];
        for x in 0..n {
            let mut d = vec![0.0; n];
            d[x] = 1.0;
            laws.push(d);
        }
        for (i, mu) in laws.iter().enumerate() {
            let k = key_relation(ch, mu, &g, h)?;
            let label = if i == 0 { "nu".to_string() } else { format!("x={}", i - 1) };
            out.check(&format!("key relation horizon={h} mu={label}"), (k.lhs - k.rhs).abs() / k.lhs.abs().max(1.0), 1e-12);
            out.check(&format!("split path mass horizon={h} mu={label}"), (k.total_mass - 1.0).abs(), 1e-12);
        }
    }
    let constant = SeqSpec::constant();
    let series = return_time_series(ch, &constant, &g, ch.nu(), 200)?;
    let ex = exact_split_moment(ch, &constant, &g, ch.nu())?;
    out.push("split moment exact", ex.value);
    out.push("return series partial sum", series.partial);
    out.check("return series vs killed recursion", (series.partial - ex.value).abs() / ex.value.max(1.0), 1e-9);
    let reps = ctx.cfg.reps.unwrap_or(20_000);
    let gf = |s: &usize| g[*s];
    let mc = estimate_modulated_moment(&ch.kernel, &ch.small_set, &constant, &gf, &Start::Law(Initial::Nu), reps, ctx.sub(0xA11), ctx.cap())?;
    out.push_estimate("split moment mc", &mc);
    out.push("split moment mc z-score", (mc.mean - ex.value) / mc.std_error);

    let f = ctx.finite_f(ch)?;
    let s2 = sigma2_exact(ch, &f, 1e-12)?;
    let pois = sigma2_poisson(ch, &f)?;
    out.push("sigma2 exact", s2.sigma2);
    out.check("sigma2 series vs poisson", (s2.sigma2 - pois).abs() / s2.sigma2.abs().max(1e-12), 1e-8);
    let ff = |s: &usize| f[*s];
    let blocks = ctx.cfg.blocks.unwrap_or(20_000);
    let reg = sigma2_regeneration(&ch.kernel, &ch.small_set, &ff, blocks, ctx.sub(0xA12), ctx.cap())?;
    let se = reg.std_error.unwrap_or(0.0);
    out.push_ci("sigma2 regeneration", reg.sigma2, reg.sigma2 - 1.96 * se, reg.sigma2 + 1.96 * se);
    out.push("sigma2 regeneration z-score", (reg.sigma2 - s2.sigma2) / se);

    let psi = ctx.psi()?;
    let t = ctx.theorem1(&psi)?;
    let gp: Vec<f64> = ch.v().iter().map(|&v| psi.eval(v)).collect();
    let ones = vec![1.0; n];
    let seq_r = SeqSpec::from_rate(&t.rate);
    let mut curves: [Vec<(f64, f64)>; 4] = Default::default();
    for x in probe_states(n) {
        let (vx, inc) = (ch.v()[x], ch.in_c(x));
        let pb = t.psi_moment_bound(vx, inc)?;
        let rb = t.r_moment_bound(vx, inc);
        let pe = exact_split_moment_at(ch, &constant, &gp, x)?;
        let re = exact_split_moment_at(ch, &seq_r, &ones, x)?;
        out.push(format!("psi moment bound x={x}"), pb);
        out.push(format!("psi moment exact x={x}"), pe.value);
        out.push(format!("r moment bound x={x}"), rb);
        out.push(format!("r moment exact x={x}"), re.value);
        out.dominance(&format!("psi moment x={x}"), pb, pe.upper(), 0.0);
        out.dominance(&format!("r moment x={x}"), rb, re.upper(), 0.0);
        for (c, y) in curves.iter_mut().zip([pb, pe.value, rb, re.value]) {
            c.push((vx, y));
        }
    }
    for (i, (name, c)) in ["psi bound", "psi exact", "r bound", "r exact"].iter().zip(curves).enumerate() {
        out.plot.add(name, c, i % 2 == 0);
    }
    out.certificates.push(("excursion".into(), t.cert.clone()));
    Ok(out)
}
