//! Finite-state Markov environments.
//!
//! A [`MarkovKernel`] is a validated row-stochastic matrix. Everything the
//! rest of the crate needs from the chain lives here: primitivity, the
//! stationary law `ν`, the decay of `|Pⁿ(i,j) − ν(j)|`, and the time-reversed
//! (dual) kernel `P*(i,j) = ν(j) P(j,i) / ν(i)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row sums further than this from one are rejected; closer ones are renormalized.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;
/// Target `‖νP − ν‖₁` for the stationary law.
pub const STATIONARY_TOLERANCE: f64 = 1e-13;
/// Iteration cap for the stationary power iteration.
pub const STATIONARY_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvironmentError {
    #[error("kernel must be a non-empty square matrix (row {row} has {len} entries, expected {expected})")]
    NotSquare { row: usize, len: usize, expected: usize },
    #[error("kernel has no states")]
    Empty,
    #[error("row {row} sums to {sum}, not 1")]
    NonStochastic { row: usize, sum: f64 },
    #[error("entry ({row},{col}) = {value} is negative or not finite")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("kernel is not primitive: no power up to {bound} is strictly positive")]
    NotPrimitive { bound: usize },
    #[error("stationary iteration stalled at residual {residual:e} after {iterations} steps")]
    StationaryNotConverged { residual: f64, iterations: usize },
    #[error("state {state} has zero stationary mass")]
    ZeroMass { state: usize },
    #[error("distribution is invalid: {0}")]
    InvalidDistribution(String),
}

/// Row-stochastic transition matrix on states `0..d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovKernel {
    dim: usize,
    entries: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

/// Probability vector over the states of a kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateDistribution(Vec<f64>);

impl StateDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self, EnvironmentError> {
        if weights.is_empty() {
            return Err(EnvironmentError::InvalidDistribution("empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(EnvironmentError::InvalidDistribution(format!("weight {w} is negative")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(EnvironmentError::InvalidDistribution(format!("weights sum to {total}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(dim: usize) -> Self {
        Self(vec![1.0 / dim as f64; dim])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `ν(g) = Σ ν(i) g(i)`.
    pub fn expect(&self, g: &[f64]) -> f64 {
        self.0.iter().zip(g).map(|(w, v)| w * v).sum()
    }
}

impl std::ops::Index<usize> for StateDistribution {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Validates a square nonnegative matrix as a Markov kernel.
pub fn validate_kernel(rows: &[Vec<f64>]) -> Result<MarkovKernel, EnvironmentError> {
    let dim = rows.len();
    if dim == 0 {
        return Err(EnvironmentError::Empty);
    }
    let mut entries = Vec::with_capacity(dim * dim);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(EnvironmentError::NotSquare { row: i, len: row.len(), expected: dim });
        }
        for (j, &value) in row.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(EnvironmentError::NegativeEntry { row: i, col: j, value });
            }
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(EnvironmentError::NonStochastic { row: i, sum });
        }
        entries.extend(row.iter().map(|v| v / sum));
    }
    Ok(MarkovKernel::from_entries(dim, entries))
}

impl MarkovKernel {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self, EnvironmentError> {
        validate_kernel(rows)
    }

    fn from_entries(dim: usize, entries: Vec<f64>) -> Self {
        let mut cumulative = Vec::with_capacity(dim * dim);
        for row in entries.chunks(dim) {
            let mut acc = 0.0;
            for v in row {
                acc += v;
                cumulative.push(acc);
            }
        }
        Self { dim, entries, cumulative }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    /// Draws the successor of `i`.
    #[inline]
    pub fn sample_next<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> usize {
        if self.cumulative.len() != self.entries.len() {
            // deserialized kernels carry no cache
            return sample_row(self.row(i), rng);
        }
        let u: f64 = rng.random();
        let cum = &self.cumulative[i * self.dim..(i + 1) * self.dim];
        let last = self.dim - 1;
        for (j, &c) in cum[..last].iter().enumerate() {
            if u < c {
                return j;
            }
        }
        // the tail absorbs rounding in the cumulative sums, but never a zero entry
        (0..self.dim).rev().find(|&j| self.get(i, j) > 0.0).unwrap_or(last)
    }

    /// `(Pg)(i) = Σ_j P(i,j) g(j)`.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        self.entries.chunks(self.dim).map(|row| row.iter().zip(g).map(|(p, v)| p * v).sum()).collect()
    }

    /// `(μP)(j) = Σ_i μ(i) P(i,j)`.
    pub fn left_apply(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, row) in self.entries.chunks(self.dim).enumerate() {
            for (o, p) in out.iter_mut().zip(row) {
                *o += mu[i] * p;
            }
        }
        out
    }

    fn matmul(&self, other: &[f64]) -> Vec<f64> {
        mat_mul(&self.entries, other, self.dim)
    }

    /// Smallest `k₀ ≤ (d−1)²+1` with `P^{k₀} > 0` entrywise.
    pub fn primitivity_index(&self) -> Result<usize, EnvironmentError> {
        let d = self.dim;
        let bound = (d - 1) * (d - 1) + 1;
        let base: Vec<bool> = self.entries.iter().map(|&v| v > 0.0).collect();
        let mut power = base.clone();
        for k in 1..=bound {
            if power.iter().all(|&b| b) {
                return Ok(k);
            }
            let mut next = vec![false; d * d];
            for i in 0..d {
                for l in 0..d {
                    if power[i * d + l] {
                        for j in 0..d {
                            next[i * d + j] |= base[l * d + j];
                        }
                    }
                }
            }
            power = next;
        }
        Err(EnvironmentError::NotPrimitive { bound })
    }

    /// The unique invariant law, by power iteration from the uniform vector.
    pub fn stationary_distribution(&self) -> Result<StateDistribution, EnvironmentError> {
        self.primitivity_index()?;
        let d = self.dim;
        let mut nu = vec![1.0 / d as f64; d];
        let mut residual = f64::INFINITY;
        for _ in 0..STATIONARY_MAX_ITER {
            let mut next = self.left_apply(&nu);
            let total: f64 = next.iter().sum();
            next.iter_mut().for_each(|v| *v /= total);
            residual = next.iter().zip(&nu).map(|(a, b)| (a - b).abs()).sum();
            nu = next;
            if residual <= STATIONARY_TOLERANCE {
                // confirm on the returned vector itself
                let check: f64 = self.left_apply(&nu).iter().zip(&nu).map(|(a, b)| (a - b).abs()).sum();
                if check <= STATIONARY_TOLERANCE {
                    return Ok(StateDistribution(polish(self, nu, check)));
                }
            }
        }
        Err(EnvironmentError::StationaryNotConverged { residual, iterations: STATIONARY_MAX_ITER })
    }

    /// `δ_n = max_{i,j} |Pⁿ(i,j) − ν(j)|` for `n = 1..=n_max`.
    pub fn mixing_decay(&self, nu: &StateDistribution, n_max: usize) -> Vec<f64> {
        let d = self.dim;
        let mut power = self.entries.clone();
        let mut out = Vec::with_capacity(n_max);
        for _ in 0..n_max {
            let delta = power.iter().enumerate().map(|(idx, &v)| (v - nu[idx % d]).abs()).fold(0.0, f64::max);
            out.push(delta);
            power = self.matmul(&power);
        }
        out
    }

    /// Induced `∞`-norms `‖Pⁿ − 𝟙ν‖` for `n = 0..=n_max`; submultiplicative in `n`.
    pub(crate) fn deviation_norms(&self, nu: &StateDistribution, n_max: usize) -> Vec<f64> {
        let d = self.dim;
        let mut power = identity(d);
        let mut out = Vec::with_capacity(n_max + 1);
        for _ in 0..=n_max {
            let norm = power.chunks(d).map(|row| row.iter().enumerate().map(|(j, &v)| (v - nu[j]).abs()).sum::<f64>()).fold(0.0, f64::max);
            out.push(norm);
            power = mat_mul(&power, &self.entries, d);
        }
        out
    }

    /// Time-reversed kernel `P*(i,j) = ν(j) P(j,i) / ν(i)`.
    pub fn dual_kernel(&self, nu: &StateDistribution) -> Result<MarkovKernel, EnvironmentError> {
        let d = self.dim;
        if let Some(state) = (0..d).find(|&i| !(nu[i] > 0.0)) {
            return Err(EnvironmentError::ZeroMass { state });
        }
        let rows: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| nu[j] * self.get(j, i) / nu[i]).collect()).collect();
        validate_kernel(&rows)
    }

    /// Exact sum over paths: `E_i[g(X_1..X_n); X_{n+1} = j]`.
    pub fn path_expectation<G>(&self, i: usize, j: usize, n: usize, g: &G) -> f64
    where
        G: Fn(&[usize]) -> f64 + ?Sized,
    {
        let mut path = vec![0usize; n];
        let mut total = 0.0;
        for_each_path(self.dim, n, &mut path, &mut |p| {
            let mut weight = self.get(i, p[0]);
            for w in p.windows(2) {
                weight *= self.get(w[0], w[1]);
            }
            weight *= self.get(p[n - 1], j);
            if weight > 0.0 {
                total += weight * g(p);
            }
        });
        total
    }
}

/// Both sides of the duality identity
/// `E_i[g(X_1..X_n); X_{n+1}=j] = E*_j[g(X*_n..X*_1); X*_{n+1}=i] ν(j)/ν(i)`,
/// each computed by full path enumeration.
pub fn duality_sides<G>(
    kernel: &MarkovKernel,
    dual: &MarkovKernel,
    nu: &StateDistribution,
    i: usize,
    j: usize,
    n: usize,
    g: &G,
) -> (f64, f64)
where
    G: Fn(&[usize]) -> f64,
{
    let lhs = kernel.path_expectation(i, j, n, g);
    let reversed = |p: &[usize]| {
        let rev: Vec<usize> = p.iter().rev().copied().collect();
        g(&rev)
    };
    let rhs = dual.path_expectation(j, i, n, &reversed) * nu[j] / nu[i];
    (lhs, rhs)
}

fn for_each_path(d: usize, n: usize, path: &mut [usize], f: &mut dyn FnMut(&[usize])) {
    if n == 0 {
        return;
    }
    path.iter_mut().for_each(|p| *p = 0);
    loop {
        f(path);
        let mut pos = n;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < d {
                break;
            }
            path[pos] = 0;
        }
    }
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    (0..row.len()).rev().find(|&j| row[j] > 0.0).unwrap_or(row.len() - 1)
}

/// Keeps iterating past the tolerance while the residual still shrinks, so the
/// returned law is accurate to rounding rather than to the stopping rule.
fn polish(kernel: &MarkovKernel, mut nu: Vec<f64>, mut residual: f64) -> Vec<f64> {
    for _ in 0..10_000 {
        let mut next = kernel.left_apply(&nu);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let r: f64 = kernel.left_apply(&next).iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        if r >= residual {
            break;
        }
        nu = next;
        residual = r;
    }
    nu
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

pub(crate) fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for l in 0..d {
            let a_il = a[i * d + l];
            if a_il != 0.0 {
                for j in 0..d {
                    out[i * d + j] += a_il * b[l * d + j];
                }
            }
        }
    }
    out
}

/// Geometric envelope `δ_n ≤ C rⁿ` for `n ≥ start`, fitted as the tightest
/// rate anchored at `δ_start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometricEnvelope {
    pub constant: f64,
    pub rate: f64,
    pub start: usize,
}

impl GeometricEnvelope {
    /// `deltas[k]` is `δ_{k+1}` as returned by [`MarkovKernel::mixing_decay`].
    pub fn fit(deltas: &[f64], start: usize) -> Option<Self> {
        let anchor = *deltas.get(start.checked_sub(1)?)?;
        if anchor == 0.0 {
            return Some(Self { constant: 0.0, rate: 0.0, start });
        }
        let mut rate: f64 = 0.0;
        for (k, &delta) in deltas.iter().enumerate().skip(start) {
            let n = k + 1;
            let r = (delta / anchor).powf(1.0 / (n - start) as f64);
            rate = rate.max(r);
        }
        let constant = anchor / rate.powi(start as i32);
        Some(Self { constant, rate, start })
    }

    pub fn bound(&self, n: usize) -> f64 {
        self.constant * self.rate.powi(n as i32)
    }
}
