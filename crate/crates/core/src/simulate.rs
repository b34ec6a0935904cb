//! Forward simulation of the joint chain `(X_n, Z_n)` and the walk `S_n`.
//!
//! Within a step the environment moves first and the generation then
//! reproduces under the new state, so `Z_n` is a sum of `Z_{n−1}` draws
//! from the law of `X_n`.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::EnvironmentModel;
use crate::offspring::{OffspringError, SamplingMode};
use crate::rng::PathRng;

/// Populations at or above this size are carried in floating point.
pub const LARGE_POPULATION: u64 = 1 << 53;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulateError {
    #[error("index {index} is beyond the horizon {horizon}")]
    IndexOutOfRange { index: usize, horizon: usize },
    #[error("trajectory was censored by overflow at step {index}")]
    Censored { index: usize },
    #[error("state {state} does not exist (d = {dim})")]
    InvalidState { state: usize, dim: usize },
}

/// Aligned sequences `X_0..X_n`, `Z_0..Z_n`, `S_0..S_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub x: Vec<usize>,
    pub z: Vec<u64>,
    pub s: Vec<f64>,
    pub weight: f64,
    /// First step whose offspring total overflowed; the sequences stop just before it.
    pub censored_at: Option<usize>,
}

impl Trajectory {
    /// Last index held by the trajectory.
    pub fn horizon(&self) -> usize {
        self.x.len() - 1
    }

    /// `Z_n > 0`.
    pub fn survival_indicator(&self, n: usize) -> Result<bool, SimulateError> {
        if n <= self.horizon() {
            return Ok(self.z[n] > 0);
        }
        match self.censored_at {
            Some(index) => Err(SimulateError::Censored { index }),
            None => Err(SimulateError::IndexOutOfRange { index: n, horizon: self.horizon() }),
        }
    }

    /// Whether the walk recomputed from `x` reproduces `s` exactly.
    pub fn walk_is_consistent(&self, model: &EnvironmentModel) -> bool {
        let mut s = 0.0;
        self.s[0] == 0.0
            && self.x.iter().zip(&self.s).skip(1).all(|(&x, &sk)| {
                s += model.rho()[x];
                s == sk
            })
    }
}

/// Simulates `n` steps from `X_0 = i`, `Z_0 = z`.
pub fn simulate(model: &EnvironmentModel, i: usize, z: u64, n: usize, rng: &mut PathRng) -> Result<Trajectory, SimulateError> {
    simulate_with(model, i, z, n, SamplingMode::Aggregate, rng)
}

pub fn simulate_with(
    model: &EnvironmentModel,
    i: usize,
    z: u64,
    n: usize,
    mode: SamplingMode,
    rng: &mut PathRng,
) -> Result<Trajectory, SimulateError> {
    check_state(model, i)?;
    let mut t = Trajectory {
        x: Vec::with_capacity(n + 1),
        z: Vec::with_capacity(n + 1),
        s: Vec::with_capacity(n + 1),
        weight: 1.0,
        censored_at: None,
    };
    t.x.push(i);
    t.z.push(z);
    t.s.push(0.0);
    let (mut x, mut pop, mut s) = (i, z, 0.0);
    for k in 1..=n {
        x = model.kernel().sample_next(x, &mut rng.environment);
        s += model.rho()[x];
        match model.law(x).sample_total_with(mode, pop, &mut rng.offspring) {
            Ok(next) => pop = next,
            Err(OffspringError::Overflow) => {
                t.censored_at = Some(k);
                break;
            }
            Err(e) => unreachable!("sampling a validated law failed: {e}"),
        }
        t.x.push(x);
        t.z.push(pop);
        t.s.push(s);
    }
    Ok(t)
}

/// Environment path only: `(X_0..X_n, S_0..S_n)`.
pub fn simulate_walk<R: Rng + ?Sized>(model: &EnvironmentModel, i: usize, n: usize, rng: &mut R) -> (Vec<usize>, Vec<f64>) {
    let mut x = Vec::with_capacity(n + 1);
    let mut s = Vec::with_capacity(n + 1);
    x.push(i);
    s.push(0.0);
    let (mut state, mut walk) = (i, 0.0);
    for _ in 0..n {
        state = model.kernel().sample_next(state, rng);
        walk += model.rho()[state];
        x.push(state);
        s.push(walk);
    }
    (x, s)
}

/// Given a fixed environment path `X_1..X_n`, runs the population only.
/// Returns `Z_n`, or `None` if a total overflowed.
pub fn simulate_given_environment<R: Rng + ?Sized>(model: &EnvironmentModel, path: &[usize], z: u64, rng: &mut R) -> Option<u64> {
    let mut pop = z;
    for &x in path {
        if pop == 0 {
            return Some(0);
        }
        pop = model.law(x).sample_total(pop, rng).ok()?;
    }
    Some(pop)
}

pub(crate) fn check_state(model: &EnvironmentModel, state: usize) -> Result<(), SimulateError> {
    if state >= model.dim() {
        return Err(SimulateError::InvalidState { state, dim: model.dim() });
    }
    Ok(())
}

/// Population size that switches to a floating-point count once exact
/// 64-bit arithmetic would lose integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Population {
    Exact(u64),
    Large(f64),
}

impl Population {
    pub fn is_extinct(&self) -> bool {
        matches!(self, Population::Exact(0))
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            Population::Exact(z) => z as f64,
            Population::Large(z) => z,
        }
    }

    fn from_f64(z: f64) -> Self {
        if z < LARGE_POPULATION as f64 {
            Population::Exact(z as u64)
        } else {
            Population::Large(z)
        }
    }
}

/// State of a path after a step, as seen by [`evolve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub step: usize,
    pub x: usize,
    pub z: Population,
    pub s: f64,
}

/// Runs the joint chain for up to `n` steps without storing it, calling
/// `observe` at step 0 and after every step. Stops at extinction or when
/// `observe` returns `false`.
///
/// Totals that would exceed [`LARGE_POPULATION`] are drawn from the normal
/// law with the exact mean and variance of the sum.
pub fn evolve<F>(model: &EnvironmentModel, i: usize, z: u64, n: usize, rng: &mut PathRng, mut observe: F)
where
    F: FnMut(&PathState) -> bool,
{
    let mut state = PathState { step: 0, x: i, z: Population::Exact(z), s: 0.0 };
    if !observe(&state) {
        return;
    }
    for step in 1..=n {
        if state.z.is_extinct() {
            return;
        }
        let x = model.kernel().sample_next(state.x, &mut rng.environment);
        let law = model.law(x);
        let next = match state.z {
            Population::Exact(pop) if pop < LARGE_POPULATION => match law.sample_total(pop, &mut rng.offspring) {
                Ok(v) => Population::from_f64(v as f64),
                Err(_) => Population::Large(law.sample_total_large(pop as f64, &mut rng.offspring)),
            },
            other => Population::from_f64(law.sample_total_large(other.as_f64(), &mut rng.offspring)),
        };
        state = PathState { step, x, z: next, s: state.s + model.rho()[x] };
        if !observe(&state) {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::MarkovKernel;
    use crate::model::presets;
    use crate::offspring::OffspringLaw;
    use crate::rng::StreamModule;
    use crate::stats::Summary;

    fn path_rng(r: u64) -> PathRng {
        PathRng::new(17, StreamModule::Simulate, r)
    }

    #[test]
    fn zero_population_stays_zero() {
        let m = presets::two_state_iid();
        let t = simulate(&m, 0, 0, 50, &mut path_rng(0)).unwrap();
        assert!(t.z.iter().all(|&z| z == 0));
        assert_eq!(t.x.len(), 51);
        assert!((0..=50).all(|n| !t.survival_indicator(n).unwrap()));
    }

    #[test]
    fn invariants_hold_on_random_paths() {
        let m = presets::three_state_nonlattice();
        for r in 0..200 {
            let t = simulate(&m, 1, 3, 100, &mut path_rng(r)).unwrap();
            assert!(t.walk_is_consistent(&m));
            assert_eq!(t.x.len(), t.z.len());
            assert_eq!(t.x.len(), t.s.len());
            if let Some(first) = t.z.iter().position(|&z| z == 0) {
                assert!(t.z[first..].iter().all(|&z| z == 0));
            }
            for n in 0..100 {
                assert!(!t.survival_indicator(n + 1).unwrap() || t.survival_indicator(n).unwrap());
            }
        }
    }

    #[test]
    fn survival_index_out_of_range() {
        let m = presets::two_state_iid();
        let t = simulate(&m, 0, 1, 5, &mut path_rng(0)).unwrap();
        assert_eq!(t.survival_indicator(6), Err(SimulateError::IndexOutOfRange { index: 6, horizon: 5 }));
    }

    #[test]
    fn identical_seeds_identical_paths() {
        let m = presets::three_state_nonlattice();
        let a = simulate(&m, 0, 5, 300, &mut path_rng(9)).unwrap();
        let b = simulate(&m, 0, 5, 300, &mut path_rng(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(format!("{:?}", a.s), format!("{:?}", b.s));
    }

    #[test]
    fn one_step_mean() {
        // E Z_1 = 4 · E e^{S_1} = 4 · (2 + 1/2)/2 = 5
        let m = presets::two_state_iid();
        let s: Summary = (0..100_000u64).map(|r| simulate(&m, 0, 4, 1, &mut path_rng(r)).unwrap().z[1] as f64).collect();
        assert!((s.mean() - 5.0).abs() <= 3.0 * s.se(), "{} ± {}", s.mean(), s.se());
    }

    #[test]
    fn mean_identity_with_common_paths() {
        // E Z_n = z E e^{S_n}: compare paired per-path values
        let m = presets::three_state_nonlattice();
        for n in [1usize, 2, 5] {
            let mut ratio_num = Summary::new();
            let mut ratio_den = Summary::new();
            let mut diff = Summary::new();
            for r in 0..40_000u64 {
                let t = simulate(&m, 0, 3, n, &mut path_rng(r)).unwrap();
                let zn = t.z[n] as f64;
                let es = 3.0 * t.s[n].exp();
                ratio_num.push(zn);
                ratio_den.push(es);
                diff.push(zn - es);
            }
            let ratio = ratio_num.mean() / ratio_den.mean();
            let se = diff.se() / ratio_den.mean();
            assert!((ratio - 1.0).abs() <= 4.0 * se, "n={n}: {ratio} ± {se}");
        }
    }

    #[test]
    fn censoring_on_overflow() {
        let m = EnvironmentModel::new(MarkovKernel::new(&[vec![1.0]]).unwrap(), vec![OffspringLaw::poisson(1e6).unwrap()]).unwrap();
        let t = simulate(&m, 0, 1, 10, &mut path_rng(0)).unwrap();
        let k = t.censored_at.expect("population must overflow");
        assert_eq!(t.horizon(), k - 1);
        assert_eq!(t.survival_indicator(10), Err(SimulateError::Censored { index: k }));
    }

    #[test]
    fn evolve_continues_past_overflow() {
        let m = EnvironmentModel::new(MarkovKernel::new(&[vec![1.0]]).unwrap(), vec![OffspringLaw::poisson(1e3).unwrap()]).unwrap();
        let mut last = None;
        evolve(&m, 0, 1, 12, &mut path_rng(1), |s| {
            last = Some(*s);
            true
        });
        let last = last.unwrap();
        assert_eq!(last.step, 12);
        assert!(matches!(last.z, Population::Large(_)));
        // log W = log Z_n − S_n is set by the first generation, Poisson(1000)/1000
        assert!((last.z.as_f64().ln() - last.s).abs() < 0.2);
    }

    #[test]
    fn evolve_matches_simulate_for_small_populations() {
        let m = presets::three_state_nonlattice();
        for r in 0..50 {
            let t = simulate(&m, 2, 2, 60, &mut path_rng(r)).unwrap();
            let mut seen = Vec::new();
            evolve(&m, 2, 2, 60, &mut path_rng(r), |s| {
                seen.push((s.x, s.z.as_f64() as u64, s.s));
                true
            });
            for (k, (x, z, s)) in seen.iter().enumerate() {
                assert_eq!((*x, *z, *s), (t.x[k], t.z[k], t.s[k]));
            }
            // evolve stops at extinction, simulate keeps the environment running
            assert!(seen.len() == t.x.len() || t.z[seen.len() - 1] == 0);
        }
    }

    #[test]
    fn critical_linear_fractional_survival_frequency() {
        // q_{10,1}(0) = 1/11 for f(s) = 1/(2 − s)
        let m = presets::linear_fractional();
        let s: Summary = (0..100_000u64)
            .map(|r| simulate(&m, 0, 1, 10, &mut path_rng(r)).unwrap().survival_indicator(10).unwrap() as u8 as f64)
            .collect();
        assert!((s.mean() - 1.0 / 11.0).abs() <= 3.0 * s.se());
    }
}
