//! Exact-identity suites.
//!
//! Everything here holds by construction up to rounding, so a failure points
//! at a numerical defect rather than at Monte Carlo noise.

use rand::Rng;
use serde::Serialize;

use crate::agresti::{q_decomposed, q_direct, EnvPath};
use crate::environment::{duality_sides, MarkovKernel};
use crate::model::EnvironmentModel;
use crate::offspring::OffspringLaw;
use crate::rng::{stream, StreamModule, Substream};
use crate::simulate::simulate_walk;
use crate::spectral;

pub const AGRESTI_TOL: f64 = 1e-10;
pub const DUALITY_TOL: f64 = 1e-12;
pub const SPECTRAL_TOL: f64 = 1e-8;
pub const HARMONIC_TOL: f64 = 1e-12;

/// Largest path count enumerated by the duality and harmonicity suites.
const ENUMERATION_LIMIT: usize = 1 << 12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub suite: &'static str,
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl IdentityCheck {
    fn new(suite: &'static str, name: &'static str, errors: &[f64], tolerance: f64) -> Self {
        let max_error = errors.iter().copied().fold(0.0, f64::max);
        let passed = errors.iter().all(|e| e.is_finite() && *e <= tolerance);
        Self { suite, name, cases: errors.len(), max_error, tolerance, passed }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Random model with `1..=d_max` states, strictly positive kernel and a mix
/// of the three offspring families. Not calibrated to criticality.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, d_max: usize) -> EnvironmentModel {
    let d = rng.random_range(1..=d_max.max(1));
    let rows: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            let raw: Vec<f64> = (0..d).map(|_| 0.05 + rng.random::<f64>()).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|v| v / sum).collect()
        })
        .collect();
    let laws = (0..d)
        .map(|_| match rng.random_range(0..3) {
            0 => OffspringLaw::geometric(rng.random_range(0.1..0.8)).unwrap(),
            1 => OffspringLaw::poisson(rng.random_range(0.3..3.0)).unwrap(),
            _ => {
                let k = rng.random_range(3..7);
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
                let sum: f64 = raw.iter().sum();
                OffspringLaw::explicit(raw.iter().map(|v| v / sum).collect()).unwrap()
            }
        })
        .collect();
    EnvironmentModel::new(MarkovKernel::new(&rows).unwrap(), laws).unwrap()
}

/// Relative gaps between the direct and decomposed `q_{n,z}(s)` on `paths`
/// sampled paths of length `1..=30`.
fn agresti_errors<R: Rng + ?Sized>(model: &EnvironmentModel, paths: usize, rng: &mut R) -> Vec<f64> {
    let mut errors = Vec::new();
    for _ in 0..paths {
        let n = rng.random_range(1..=30);
        let (x, _) = simulate_walk(model, rng.random_range(0..model.dim()), n, rng);
        let path = EnvPath::new(model, x[1..].to_vec()).expect("simulated states are valid");
        for z in [1, 2, 5] {
            for s in [0.0, 0.3, 0.9] {
                let a = q_direct(model, &path, z, s).expect("admissible arguments");
                let b = q_decomposed(model, &path, z, s).expect("admissible arguments");
                errors.push((a - b).abs() / a);
            }
        }
    }
    errors
}

/// An arbitrary bounded path functional that is not symmetric under reversal.
fn test_functional(path: &[usize]) -> f64 {
    path.iter().enumerate().map(|(k, &x)| ((k + 1) * (x + 2)) as f64).product::<f64>().sin()
}

fn max_duality_length(d: usize) -> usize {
    (1..=4).rev().find(|&n| d.pow(n as u32) <= ENUMERATION_LIMIT).unwrap_or(1)
}

fn duality_errors(kernel: &MarkovKernel, nu: &crate::StateDistribution) -> Vec<f64> {
    let dual = kernel.dual_kernel(nu).expect("stationary law has full support");
    let d = kernel.dim();
    let mut errors = Vec::new();
    for n in 1..=max_duality_length(d) {
        for i in 0..d {
            for j in 0..d {
                let (lhs, rhs) = duality_sides(kernel, &dual, nu, i, j, n, &test_functional);
                errors.push((lhs - rhs).abs());
            }
        }
    }
    errors
}

fn involution_errors(kernel: &MarkovKernel, nu: &crate::StateDistribution) -> (Vec<f64>, Vec<f64>) {
    let dual = kernel.dual_kernel(nu).expect("stationary law has full support");
    let back = dual.dual_kernel(nu).expect("stationary law has full support");
    let d = kernel.dim();
    let involution = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| (back.get(i, j) - kernel.get(i, j)).abs()).collect();
    let image = dual.left_apply(nu.weights());
    let invariance = image.iter().zip(nu.weights()).map(|(a, b)| (a - b).abs()).collect();
    (involution, invariance)
}

fn spectral_errors(model: &EnvironmentModel) -> (f64, f64) {
    let k0 = (spectral::k(model, 0.0) - 1.0).abs();
    let slope = (spectral::k_prime0_numeric(model) - model.drift()).abs();
    (k0, slope)
}

/// `E_i[(y + S_n); τ_y > n]` by enumeration of all `d^n` paths.
pub fn killed_walk_exact(model: &EnvironmentModel, i: usize, y: f64, n: usize) -> f64 {
    fn walk(model: &EnvironmentModel, x: usize, level: f64, weight: f64, left: usize) -> f64 {
        if left == 0 {
            return weight * level;
        }
        let mut total = 0.0;
        for j in 0..model.dim() {
            let p = model.kernel().get(x, j);
            let next = level + model.rho()[j];
            if p > 0.0 && next > 0.0 {
                total += walk(model, j, next, weight * p, left - 1);
            }
        }
        total
    }
    walk(model, i, y, 1.0, n)
}

/// `V_{n+1}(i,y) = Σ_j P(i,j) V_n(j, y + ρ(j)) 1{y + ρ(j) > 0}`, both sides by
/// enumeration. Errors are relative to `max(1, |V|)`.
fn harmonic_errors(model: &EnvironmentModel) -> Vec<f64> {
    let d = model.dim();
    let n_max = (1..=6).rev().find(|&n| d.pow(n as u32 + 1) <= ENUMERATION_LIMIT).unwrap_or(1);
    let mut errors = Vec::new();
    for n in 1..=n_max {
        for i in 0..d {
            for y in [0.0, 0.5, 1.0, 2.0] {
                let lhs = killed_walk_exact(model, i, y, n + 1);
                let rhs: f64 = (0..d)
                    .map(|j| {
                        let level = y + model.rho()[j];
                        if level > 0.0 {
                            model.kernel().get(i, j) * killed_walk_exact(model, j, level, n)
                        } else {
                            0.0
                        }
                    })
                    .sum();
                errors.push((lhs - rhs).abs() / lhs.abs().max(1.0));
            }
        }
    }
    errors
}

/// All suites on one model; sampled paths come from the model itself.
pub fn verify_model(model: &EnvironmentModel, seed: u64) -> IdentityReport {
    let mut rng = stream(seed, StreamModule::Identities, Substream::Environment, 0);
    let (involution, invariance) = involution_errors(model.kernel(), model.nu());
    let (k0, slope) = spectral_errors(model);
    IdentityReport {
        checks: vec![
            IdentityCheck::new("agresti", "direct vs decomposed", &agresti_errors(model, 50, &mut rng), AGRESTI_TOL),
            IdentityCheck::new("duality", "path reversal", &duality_errors(model.kernel(), model.nu()), DUALITY_TOL),
            IdentityCheck::new("duality", "dual involution", &involution, DUALITY_TOL),
            IdentityCheck::new("duality", "nu invariance", &invariance, DUALITY_TOL),
            IdentityCheck::new("spectral", "k(0) = 1", &[k0], SPECTRAL_TOL),
            IdentityCheck::new("spectral", "k'(0) = nu(rho)", &[slope], SPECTRAL_TOL),
            IdentityCheck::new("harmonicity", "one-step recursion", &harmonic_errors(model), HARMONIC_TOL),
        ],
    }
}

/// The same suites on `count` random models with up to four states; duality
/// uses the first three-state-or-smaller ones.
pub fn verify_random(count: usize, seed: u64) -> IdentityReport {
    let mut rng = stream(seed, StreamModule::Identities, Substream::Auxiliary, 0);
    let (mut agresti, mut duality, mut involution, mut invariance, mut k0, mut slope) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        let model = random_model(&mut rng, 4);
        agresti.extend(agresti_errors(&model, 1, &mut rng));
        if model.dim() <= 3 {
            duality.extend(duality_errors(model.kernel(), model.nu()));
        }
        let (a, b) = involution_errors(model.kernel(), model.nu());
        involution.extend(a);
        invariance.extend(b);
        let (a, b) = spectral_errors(&model);
        k0.push(a);
        slope.push(b);
    }
    IdentityReport {
        checks: vec![
            IdentityCheck::new("agresti", "direct vs decomposed", &agresti, AGRESTI_TOL),
            IdentityCheck::new("duality", "path reversal", &duality, DUALITY_TOL),
            IdentityCheck::new("duality", "dual involution", &involution, DUALITY_TOL),
            IdentityCheck::new("duality", "nu invariance", &invariance, DUALITY_TOL),
            IdentityCheck::new("spectral", "k(0) = 1", &k0, SPECTRAL_TOL),
            IdentityCheck::new("spectral", "k'(0) = nu(rho)", &slope, SPECTRAL_TOL),
        ],
    }
}
