//! Experiment configuration file.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::rate_kit::PsiConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Rates,
    Bounds,
    Tail,
    Clt,
    BerryEsseen,
    Mdp,
    Deviation,
    VerifyAll,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Rates => "rates",
            Study::Bounds => "bounds",
            Study::Tail => "tail",
            Study::Clt => "clt",
            Study::BerryEsseen => "berry-esseen",
            Study::Mdp => "mdp",
            Study::Deviation => "deviation",
            Study::VerifyAll => "verify-all",
        }
    }
}

/// `b_n = n^a (ln n)^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedConfig {
    pub a: f64,
    #[serde(default)]
    pub p: f64,
}

/// Multiplies one certificate constant before any bound is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestHook {
    pub corrupt_constant: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Zoo name or path to a JSON chain.
    pub chain: String,
    pub study: Study,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub reps: Option<usize>,
    #[serde(default)]
    pub blocks: Option<usize>,
    #[serde(default)]
    pub n_boot: Option<usize>,
    #[serde(default)]
    pub cap: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub psi: Option<PsiConfig>,
    /// Function values per state (finite chains only).
    #[serde(default)]
    pub f: Option<Vec<f64>>,
    /// Starting state; an index for finite chains.
    #[serde(default)]
    pub x0: Option<f64>,
    #[serde(default)]
    pub k_grid: Option<Vec<u64>>,
    #[serde(default)]
    pub m_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub n_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub eps_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub n_multipliers: Option<Vec<f64>>,
    #[serde(default)]
    pub speeds: Option<Vec<SpeedConfig>>,
    /// Threshold `x` in `P(|S_n| >= x b_n)`; defaults to `sigma`.
    #[serde(default)]
    pub mdp_x: Option<f64>,
    #[serde(default)]
    pub test_hook: Option<TestHook>,
}

fn non_empty<T>(name: &str, v: &Option<Vec<T>>) -> Result<()> {
    match v {
        Some(v) if v.is_empty() => Err(Error::Validation(format!("`{name}` must not be empty"))),
        _ => Ok(()),
    }
}

fn positive(name: &str, v: &Option<Vec<f64>>) -> Result<()> {
    match v {
        Some(v) if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) => Err(Error::Validation(format!("`{name}` entries must be positive and finite"))),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::Validation("`seed` is mandatory (in the config or via --seed)".into()));
        }
        if self.chain.trim().is_empty() {
            return Err(Error::Validation("`chain` must name a zoo entry or a JSON file".into()));
        }
        non_empty("k_grid", &self.k_grid)?;
        non_empty("m_grid", &self.m_grid)?;
        non_empty("n_grid", &self.n_grid)?;
        non_empty("eps_grid", &self.eps_grid)?;
        non_empty("n_multipliers", &self.n_multipliers)?;
        non_empty("speeds", &self.speeds)?;
        positive("m_grid", &self.m_grid)?;
        positive("eps_grid", &self.eps_grid)?;
        positive("n_multipliers", &self.n_multipliers)?;
        if let Some(m) = &self.m_grid {
            if m.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Validation("`m_grid` must be increasing".into()));
            }
        }
        if let Some(n) = &self.n_grid {
            if n[0] == 0 || n.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Validation("`n_grid` must be positive and increasing".into()));
            }
        }
        if let Some(r) = self.reps {
            if r < 100 {
                return Err(Error::Validation(format!("`reps` must be at least 100, got {r}")));
            }
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Validation(format!("`delta` must be positive, got {d}")));
            }
        }
        if let Some(h) = &self.test_hook {
            if !(h.factor.is_finite() && h.factor >= 0.0) {
                return Err(Error::Validation("`test_hook.factor` must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}
