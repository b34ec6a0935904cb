//! The joint model: a primitive environment kernel and one offspring law per state.

use thiserror::Error;

use crate::environment::{EnvironmentError, MarkovKernel, StateDistribution};
use crate::offspring::{Moments, OffspringError, OffspringLaw};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error("state {state}: {source}")]
    Offspring { state: String, source: OffspringError },
    #[error("kernel has {expected} states but {got} offspring laws were given")]
    LawCount { expected: usize, got: usize },
    #[error("state label {0:?} appears twice")]
    DuplicateLabel(String),
    #[error("state {state}: {reason}")]
    Calibration { state: String, reason: String },
}

/// Environment kernel plus per-state offspring laws, with `ρ` and `ν` cached.
#[derive(Debug, Clone)]
pub struct EnvironmentModel {
    labels: Vec<String>,
    kernel: MarkovKernel,
    laws: Vec<OffspringLaw>,
    moments: Vec<Moments>,
    rho: Vec<f64>,
    nu: StateDistribution,
}

impl EnvironmentModel {
    /// States are labelled `0..d`.
    pub fn new(kernel: MarkovKernel, laws: Vec<OffspringLaw>) -> Result<Self, ModelError> {
        let labels = (0..kernel.dim()).map(|i| i.to_string()).collect();
        Self::with_labels(labels, kernel, laws)
    }

    pub fn with_labels(labels: Vec<String>, kernel: MarkovKernel, laws: Vec<OffspringLaw>) -> Result<Self, ModelError> {
        let d = kernel.dim();
        if laws.len() != d || labels.len() != d {
            return Err(ModelError::LawCount { expected: d, got: laws.len().min(labels.len()) });
        }
        for (k, label) in labels.iter().enumerate() {
            if labels[..k].contains(label) {
                return Err(ModelError::DuplicateLabel(label.clone()));
            }
        }
        let mut moments = Vec::with_capacity(d);
        for (label, law) in labels.iter().zip(&laws) {
            let m = law.moments().map_err(|source| ModelError::Offspring { state: label.clone(), source })?;
            moments.push(m);
        }
        let rho = moments.iter().map(|m| m.mean.ln()).collect();
        let nu = kernel.stationary_distribution()?;
        Ok(Self { labels, kernel, laws, moments, rho, nu })
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn kernel(&self) -> &MarkovKernel {
        &self.kernel
    }

    pub fn laws(&self) -> &[OffspringLaw] {
        &self.laws
    }

    pub fn law(&self, state: usize) -> &OffspringLaw {
        &self.laws[state]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn state_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn moments(&self, state: usize) -> Moments {
        self.moments[state]
    }

    /// `ρ(i) = ln f_i′(1)`.
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// The stationary law of the environment.
    pub fn nu(&self) -> &StateDistribution {
        &self.nu
    }

    /// `ν(ρ)`, the drift of the associated Markov walk.
    pub fn drift(&self) -> f64 {
        self.nu.expect(&self.rho)
    }

    /// `max_i f_i″(1)/f_i′(1)²`, the uniform bound on the `η` functionals.
    pub fn eta_bound(&self) -> f64 {
        self.moments.iter().map(|m| m.second_factorial / (m.mean * m.mean)).fold(0.0, f64::max)
    }

    /// Rescales the mean of one state's law so that `ν(ρ) = 0`.
    pub fn calibrate(&self, state: usize) -> Result<Self, ModelError> {
        let label = self.labels[state].clone();
        let others: f64 = (0..self.dim()).filter(|&j| j != state).map(|j| self.nu[j] * self.rho[j]).sum();
        let target = (-others / self.nu[state]).exp();
        let law = self.laws[state].with_mean(target).map_err(|e| ModelError::Calibration { state: label, reason: e.to_string() })?;
        let mut laws = self.laws.clone();
        laws[state] = law;
        Self::with_labels(self.labels.clone(), self.kernel.clone(), laws)
    }
}

/// Small models with known closed-form properties.
pub mod presets {
    use super::*;

    /// Two states, i.i.d. uniform environment, Geometric laws with means 2 and 1/2.
    /// Critical with `σ² = (ln 2)²`, but lattice.
    pub fn two_state_iid() -> EnvironmentModel {
        let kernel = MarkovKernel::new(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let laws = vec![OffspringLaw::geometric(2.0 / 3.0).unwrap(), OffspringLaw::geometric(1.0 / 3.0).unwrap()];
        EnvironmentModel::new(kernel, laws).unwrap()
    }

    /// Single state with pgf `1/(2 − s)`: the critical linear-fractional model.
    pub fn linear_fractional() -> EnvironmentModel {
        let kernel = MarkovKernel::new(&[vec![1.0]]).unwrap();
        EnvironmentModel::new(kernel, vec![OffspringLaw::geometric(0.5).unwrap()]).unwrap()
    }

    /// Three states with a doubly stochastic kernel (so `ν` is uniform) and
    /// means `2, 0.8, 0.625`, whose logarithms sum to zero. The log-means are
    /// rationally independent, so the walk is non-lattice and the model critical.
    pub fn three_state_nonlattice() -> EnvironmentModel {
        let kernel = MarkovKernel::new(&[vec![0.5, 0.3, 0.2], vec![0.2, 0.5, 0.3], vec![0.3, 0.2, 0.5]]).unwrap();
        let laws = vec![
            OffspringLaw::geometric_with_mean(2.0).unwrap(),
            OffspringLaw::poisson(0.8).unwrap(),
            OffspringLaw::geometric_with_mean(0.625).unwrap(),
        ];
        EnvironmentModel::new(kernel, laws).unwrap()
    }
}
