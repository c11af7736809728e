//! Python bindings: rates, envelopes, finite chains, certificates and the
//! Monte-Carlo estimators.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use subgeo::bound_engine::{theorem1_constants, verify_drift, ExcursionBounds};
use subgeo::chain_model::{ChainFile, FiniteChain};
use subgeo::cli::{self, ExperimentConfig};
use subgeo::limit_lab::{berry_esseen_gate, clt_gate, mdp_rate as mdp_rate_core, sigma2_exact};
use subgeo::model_zoo::{self, ZooEntry};
use subgeo::oracle::{exact_split_moment_at, exact_stationary, key_relation as key_relation_core};
use subgeo::rate_kit::{check_g_membership, default_grid, PsiSpec, RateSpec, SeqSpec};
use subgeo::split_sim::{estimate_modulated_moment, estimate_tail, Start};

const CAP: usize = 10_000_000;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Drift rate `phi`.
#[pyclass(name = "Rate", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRate(RateSpec);

#[pymethods]
impl PyRate {
    #[staticmethod]
    #[pyo3(signature = (alpha, c = 1.0))]
    fn polynomial(alpha: f64, c: f64) -> PyResult<Self> {
        RateSpec::polynomial_scaled(c, alpha).map(Self).map_err(err)
    }

    /// `c v^alpha log(d + v)^-1`-type rate.
    #[staticmethod]
    #[pyo3(signature = (c, alpha, d = None))]
    fn log_perturbed(c: f64, alpha: f64, d: Option<f64>) -> PyResult<Self> {
        RateSpec::log_perturbed(c, alpha, d).map(Self).map_err(err)
    }

    #[getter]
    fn alpha(&self) -> Option<f64> {
        self.0.alpha()
    }

    fn phi(&self, v: f64) -> f64 {
        self.0.phi(v)
    }

    fn big_phi(&self, v: f64) -> PyResult<f64> {
        self.0.big_phi(v).map_err(err)
    }

    fn big_phi_inverse(&self, u: f64) -> PyResult<f64> {
        self.0.big_phi_inverse(u).map_err(err)
    }

    /// `r_phi(u)`.
    fn rate(&self, u: f64) -> PyResult<f64> {
        self.0.rate(u).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Rate({})", self.0.describe())
    }
}

#[pyclass(name = "Psi", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPsi(PsiSpec);

#[pymethods]
impl PyPsi {
    #[staticmethod]
    fn power(beta: f64) -> PyResult<Self> {
        PsiSpec::power(beta).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (beta, shift = 1.0))]
    fn log_power(beta: f64, shift: f64) -> PyResult<Self> {
        PsiSpec::log_power_shifted(beta, shift).map(Self).map_err(err)
    }

    #[staticmethod]
    fn constant() -> Self {
        Self(PsiSpec::constant())
    }

    fn __call__(&self, v: f64) -> f64 {
        self.0.eval(v)
    }

    fn __repr__(&self) -> String {
        format!("Psi({})", self.0.describe())
    }
}

/// Whether `psi` lies in the envelope class of `rate`.
#[pyfunction]
fn in_g(rate: &PyRate, psi: &PyPsi) -> PyResult<bool> {
    Ok(check_g_membership(&rate.0, &psi.0, &default_grid()).map_err(err)?.member)
}

#[pyfunction]
fn clt_admissible(rate: &PyRate, psi: &PyPsi) -> PyResult<bool> {
    Ok(clt_gate(&rate.0, &psi.0).map_err(err)?.pass)
}

#[pyfunction]
fn berry_esseen_admissible(rate: &PyRate, psi: &PyPsi) -> PyResult<bool> {
    Ok(berry_esseen_gate(&rate.0, &psi.0).map_err(err)?.pass)
}

#[pyfunction]
fn mdp_rate(sigma2: f64, x: f64) -> PyResult<f64> {
    mdp_rate_core(sigma2, x).map_err(err)
}

/// A finite chain with its minorisation and drift data.
#[pyclass(name = "Chain", frozen)]
struct PyChain {
    entry: ZooEntry,
}

impl PyChain {
    fn finite(&self) -> &FiniteChain {
        self.entry.finite().expect("constructed from a finite chain")
    }

    fn vec_of(&self, name: &str, v: Vec<f64>) -> PyResult<Vec<f64>> {
        if v.len() != self.finite().n() {
            return Err(err(format!("`{name}` has length {} but the chain has {} states", v.len(), self.finite().n())));
        }
        Ok(v)
    }
}

#[pymethods]
impl PyChain {
    /// Finite entry of the model zoo, e.g. `"two-state(0.3,0.4)"`.
    #[staticmethod]
    fn zoo(name: &str) -> PyResult<Self> {
        let entry = model_zoo::build(name).map_err(err)?;
        if entry.finite().is_none() {
            return Err(err(format!("`{name}` is not a finite chain")));
        }
        Ok(Self { entry })
    }

    /// Chain from the JSON chain-file format.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let file: ChainFile = serde_json::from_str(text).map_err(err)?;
        let chain = FiniteChain::from_file(&file).map_err(err)?;
        Ok(Self { entry: ZooEntry::from_chain("python", chain).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.finite().to_file().map_err(err)?).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.finite().n()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.finite().epsilon()
    }

    #[getter]
    fn small_set(&self) -> Vec<usize> {
        self.finite().c().to_vec()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.finite().v().to_vec()
    }

    #[getter]
    fn rate(&self) -> PyRate {
        PyRate(self.finite().drift.rate.clone())
    }

    fn stationary(&self) -> PyResult<Vec<f64>> {
        exact_stationary(self.finite()).map_err(err)
    }

    /// `(holds, margin)` for the drift inequality, checked state by state.
    fn verify_drift(&self) -> (bool, f64) {
        let r = verify_drift(self.finite());
        (r.holds, r.margin)
    }

    /// `(sigma^2, pi(f))` of the additive functional `f`.
    fn asymptotic_variance(&self, f: Vec<f64>) -> PyResult<(f64, f64)> {
        let f = self.vec_of("f", f)?;
        let r = sigma2_exact(self.finite(), &f, 1e-13).map_err(err)?;
        Ok((r.sigma2, r.pi_f))
    }

    /// Exact `E[sum_{k<=sigma} r(k) g(X_k)]` from state `x`; `linear` selects
    /// `r(k) = 1 + k`, otherwise `r = 1`.
    #[pyo3(signature = (g, x, linear = false))]
    fn split_moment(&self, g: Vec<f64>, x: usize, linear: bool) -> PyResult<f64> {
        let g = self.vec_of("g", g)?;
        let seq = if linear { SeqSpec::linear() } else { SeqSpec::constant() };
        Ok(exact_split_moment_at(self.finite(), &seq, &g, x).map_err(err)?.value)
    }

    /// Both sides of the fixed-horizon identity, by path enumeration.
    fn key_relation(&self, mu: Vec<f64>, g: Vec<f64>, horizon: usize) -> PyResult<(f64, f64)> {
        let (mu, g) = (self.vec_of("mu", mu)?, self.vec_of("g", g)?);
        let k = key_relation_core(self.finite(), &mu, &g, horizon).map_err(err)?;
        Ok((k.lhs, k.rhs))
    }

    #[pyo3(signature = (psi, delta = 0.5))]
    fn certificate(&self, psi: &PyPsi, delta: f64) -> PyResult<Certificate> {
        let t = theorem1_constants(&self.entry.summary(), &psi.0, delta).map_err(err)?;
        Ok(Certificate(t))
    }

    /// Monte-Carlo `E[sum_{k<=sigma} r_phi(k)]` from `x`: `(mean, std_error)`.
    fn estimate_rate_moment(&self, x: usize, reps: usize, seed: u64) -> PyResult<(f64, f64)> {
        let ch = self.finite();
        let seq = SeqSpec::from_rate(&ch.drift.rate);
        let m = estimate_modulated_moment(&ch.kernel, &ch.small_set, &seq, &|_| 1.0, &Start::point(x), reps, seed, CAP).map_err(err)?;
        Ok((m.mean, m.std_error))
    }

    /// Empirical `P(sum_{k<=sigma} w(X_k) >= M)` for each `M` in `m_grid`.
    fn estimate_tail(&self, w: Vec<f64>, m_grid: Vec<f64>, x: usize, reps: usize, seed: u64) -> PyResult<Vec<f64>> {
        let w = self.vec_of("w", w)?;
        let ch = self.finite();
        let t = estimate_tail(&ch.kernel, &ch.small_set, &|s: &usize| w[*s], &m_grid, &Start::point(x), reps, seed, CAP).map_err(err)?;
        Ok(t.points.iter().map(|p| p.p_hat).collect())
    }

    fn __repr__(&self) -> String {
        format!("Chain({}, n={})", self.entry.name, self.finite().n())
    }
}

/// Constants of the excursion bounds.
#[pyclass(frozen)]
struct Certificate(ExcursionBounds);

#[pymethods]
impl Certificate {
    #[getter]
    fn constants(&self) -> BTreeMap<String, f64> {
        self.0.cert.constants.clone()
    }

    /// Upper bound on `E[sum_{k<=sigma} r_phi(k)]` at a state with drift value `v`.
    fn r_moment_bound(&self, v: f64, in_c: bool) -> f64 {
        self.0.r_moment_bound(v, in_c)
    }

    fn psi_moment_bound(&self, v: f64, in_c: bool) -> PyResult<f64> {
        self.0.psi_moment_bound(v, in_c).map_err(err)
    }

    /// `P(sum_{k<=sigma} psi(V)(X_k) >= M)` bound, optimised over its free parameters.
    fn tail_bound(&self, v: f64, m: f64) -> PyResult<f64> {
        Ok(self.0.tail_bound_optimized(v, m).map_err(err)?.ln_bound.exp().min(1.0))
    }
}

#[pyfunction]
fn zoo_names() -> Vec<String> {
    model_zoo::list().into_iter().map(|i| i.name).collect()
}

/// Runs an experiment config (JSON text) and returns `(exit_code, out_dir)`.
#[pyfunction]
fn run(config: &str) -> PyResult<(i32, String)> {
    let cfg: ExperimentConfig = serde_json::from_str(config).map_err(err)?;
    match cli::run_config(&cfg, None) {
        Ok(o) => Ok((o.exit_code, o.out_dir.display().to_string())),
        Err((code, msg)) => Err(err(format!("exit {code}: {msg}"))),
    }
}

#[pymodule]
fn subgeo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRate>()?;
    m.add_class::<PyPsi>()?;
    m.add_class::<PyChain>()?;
    m.add_class::<Certificate>()?;
    m.add_function(wrap_pyfunction!(in_g, m)?)?;
    m.add_function(wrap_pyfunction!(clt_admissible, m)?)?;
    m.add_function(wrap_pyfunction!(berry_esseen_admissible, m)?)?;
    m.add_function(wrap_pyfunction!(mdp_rate, m)?)?;
    m.add_function(wrap_pyfunction!(zoo_names, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
