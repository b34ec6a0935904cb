//! Conditional survival given the environment.
//!
//! For a fixed path `X_1..X_n`, `q_{n,z}(s) = 1 − (f_{X_1}∘…∘f_{X_n}(s))^z`.
//! It is evaluated two ways: by direct composition, and through the exact
//! reciprocal decomposition
//!
//! ```text
//! 1/q = (1/z)(e^{−S_n}/(1−s) + Σ_{k<n} e^{−S_k} η_{k+1,n}(s)) + ψ_z(f_{X_1}∘…∘f_{X_n}(s))
//! ```
//!
//! with `η_{k,n}(s) = φ_{X_k}(f_{X_{k+1}}∘…∘f_{X_n}(s))`. Both passes work on
//! complements `1 − f(·)`, which stay accurate however close the iterates get to 1.

use serde::Serialize;
use thiserror::Error;

use crate::model::EnvironmentModel;
use crate::offspring::psi_complement;

/// `q_∞` truncation is accepted when the last term is below this share of the sum.
pub const TAIL_RATIO: f64 = 1e-9;
/// Relative gap between the two evaluations beyond which the decomposed one is preferred.
pub const CANONICAL_GAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgrestiError {
    #[error("environment path is empty")]
    EmptyPath,
    #[error("path visits state {state}, but the model has {dim} states")]
    InvalidState { state: usize, dim: usize },
    #[error("argument s = {0} is outside the admissible range")]
    Domain(f64),
    #[error("population size must be at least 1")]
    ZeroPopulation,
    #[error("q_inf tail not converged: last term is {ratio:e} of the running sum")]
    TailNotConverged { ratio: f64 },
}

/// Environment states `X_1..X_n`, excluding the starting state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnvPath(Vec<usize>);

impl EnvPath {
    pub fn new(model: &EnvironmentModel, states: Vec<usize>) -> Result<Self, AgrestiError> {
        if states.is_empty() {
            return Err(AgrestiError::EmptyPath);
        }
        if let Some(&state) = states.iter().find(|&&x| x >= model.dim()) {
            return Err(AgrestiError::InvalidState { state, dim: model.dim() });
        }
        Ok(Self(states))
    }

    pub fn states(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First `n` states.
    pub fn prefix(&self, n: usize) -> Self {
        Self(self.0[..n.clamp(1, self.0.len())].to_vec())
    }
}

/// `t_k = 1 − f_{X_{k+1}}∘…∘f_{X_n}(s)` for `k = 0..=n`.
pub fn composition_complements(model: &EnvironmentModel, path: &EnvPath, s: f64) -> Vec<f64> {
    let n = path.len();
    let mut t = vec![0.0; n + 1];
    t[n] = 1.0 - s;
    for k in (0..n).rev() {
        t[k] = model.law(path.0[k]).pgf_complement(t[k + 1]);
    }
    t
}

fn check(s: f64, z: u64, upper_open: bool) -> Result<(), AgrestiError> {
    let ok = if upper_open { (0.0..1.0).contains(&s) } else { (0.0..=1.0).contains(&s) };
    if !ok {
        return Err(AgrestiError::Domain(s));
    }
    if z == 0 {
        return Err(AgrestiError::ZeroPopulation);
    }
    Ok(())
}

/// `1 − (1 − t)^z` without cancellation.
fn one_minus_power(t: f64, z: u64) -> f64 {
    if t >= 1.0 {
        return 1.0;
    }
    -(z as f64 * (-t).ln_1p()).exp_m1()
}

/// `q_{n,z}(s)` by composing the pgfs right to left.
pub fn q_direct(model: &EnvironmentModel, path: &EnvPath, z: u64, s: f64) -> Result<f64, AgrestiError> {
    check(s, z, false)?;
    let t = composition_complements(model, path, s);
    Ok(one_minus_power(t[0], z).clamp(0.0, 1.0))
}

/// `η_{1,n}(s), …, η_{n,n}(s)`.
pub fn eta_sequence(model: &EnvironmentModel, path: &EnvPath, s: f64) -> Result<Vec<f64>, AgrestiError> {
    check(s, 1, true)?;
    let t = composition_complements(model, path, s);
    Ok(eta_from(model, path, &t))
}

fn eta_from(model: &EnvironmentModel, path: &EnvPath, t: &[f64]) -> Vec<f64> {
    (0..path.len()).map(|k| model.law(path.0[k]).phi_complement(t[k + 1])).collect()
}

/// Terms of the decomposition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decomposition {
    /// `e^{−S_n}/(z(1 − s))`
    pub boundary: f64,
    /// `(1/z) Σ_{k<n} e^{−S_k} η_{k+1,n}(s)`, summed in order
    pub series: f64,
    /// `(1/z) e^{−S_{n−1}} η_{n,n}(s)`, the last series term
    pub last_term: f64,
    /// `ψ_z(f_{X_1}∘…∘f_{X_n}(s))`
    pub psi: f64,
}

impl Decomposition {
    pub fn reciprocal(&self) -> f64 {
        self.boundary + self.series + self.psi
    }
}

pub fn decompose(model: &EnvironmentModel, path: &EnvPath, z: u64, s: f64) -> Result<Decomposition, AgrestiError> {
    check(s, z, true)?;
    let t = composition_complements(model, path, s);
    let eta = eta_from(model, path, &t);
    let zf = z as f64;
    let mut walk = 0.0f64;
    let mut series = 0.0;
    let mut last_term = 0.0;
    for (k, e) in eta.iter().enumerate() {
        // S_k with S_0 = 0; X_{k+1} is path[k]
        last_term = (-walk).exp() * e / zf;
        series += last_term;
        walk += model.rho()[path.0[k]];
    }
    Ok(Decomposition { boundary: (-walk).exp() / (zf * (1.0 - s)), series, last_term, psi: psi_complement(z, t[0]) })
}

/// `q_{n,z}(s)` from the reciprocal decomposition.
pub fn q_decomposed(model: &EnvironmentModel, path: &EnvPath, z: u64, s: f64) -> Result<f64, AgrestiError> {
    Ok(1.0 / decompose(model, path, z, s)?.reciprocal())
}

/// Both evaluations and the one reported as canonical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QValue {
    pub direct: f64,
    pub decomposed: f64,
    pub canonical: f64,
}

pub fn q_value(model: &EnvironmentModel, path: &EnvPath, z: u64, s: f64) -> Result<QValue, AgrestiError> {
    let direct = q_direct(model, path, z, s)?;
    let decomposed = q_decomposed(model, path, z, s)?;
    let gap = (direct - decomposed).abs() / decomposed.abs().max(f64::MIN_POSITIVE);
    let canonical = if gap > CANONICAL_GAP { decomposed } else { direct };
    Ok(QValue { direct, decomposed, canonical })
}

/// Truncated `q_{∞,z}(s)⁻¹`, with horizon-`n` stand-ins for the limiting `η` and `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QInfinity {
    pub reciprocal: f64,
    /// Last series term over the running sum.
    pub tail_ratio: f64,
    pub converged: bool,
}

impl QInfinity {
    pub fn q(&self) -> f64 {
        1.0 / self.reciprocal
    }
}

/// The truncation without the convergence guard.
pub fn q_infinity_terms(model: &EnvironmentModel, path: &EnvPath, z: u64, s: f64) -> Result<QInfinity, AgrestiError> {
    let d = decompose(model, path, z, s)?;
    let reciprocal = d.series + d.psi;
    let tail_ratio = d.last_term / d.series;
    Ok(QInfinity { reciprocal, tail_ratio, converged: tail_ratio <= TAIL_RATIO })
}

pub fn q_infinity_reciprocal(model: &EnvironmentModel, path: &EnvPath, z: u64, s: f64) -> Result<f64, AgrestiError> {
    let q = q_infinity_terms(model, path, z, s)?;
    if !q.converged {
        return Err(AgrestiError::TailNotConverged { ratio: q.tail_ratio });
    }
    Ok(q.reciprocal)
}
