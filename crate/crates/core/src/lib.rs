//! Critical branching processes in a finite-state Markovian environment.
//!
//! The crate is organised bottom-up:
//!
//! * [`environment`]: Markov kernels, stationary law, mixing, the dual kernel.
//! * [`offspring`]: offspring laws and their generating-function calculus.
//! * [`model`]: the joint model (kernel + one law per state).
//! * [`spectral`]: transfer operator, `k(λ)`, classification, `σ²`, lattice test.
//! * [`simulate`]: forward simulation of `(X_n, Z_n, S_n)`.
//! * [`agresti`]: exact conditional survival functionals given the environment.
//! * [`conditioned`]: killed walks, the harmonic function `V`, the `P⁺` reweighting,
//!   `U(i,y,z)` and the survival constant `u(i,z)`.
//! * [`theorems`]: Monte Carlo harness for the limit theorems.
//!
//! Randomness is always drawn from explicit per-replicate streams ([`rng`]), so
//! every estimate is reproducible bit-for-bit from a master seed.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agresti;
pub mod conditioned;
pub mod environment;
pub mod identities;
pub mod model;
pub mod offspring;
mod parallel;
pub mod rng;
pub mod simulate;
pub mod spectral;
pub mod stats;
pub mod theorems;

pub use environment::{EnvironmentError, MarkovKernel, StateDistribution};
pub use model::{EnvironmentModel, ModelError};
pub use offspring::{OffspringError, OffspringLaw};
pub use spectral::{Classification, SpectralReport};
