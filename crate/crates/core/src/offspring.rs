//! Offspring laws and their generating-function calculus.
//!
//! Each law exposes its pgf `f(s) = E[s^ξ]`, the moments `f′(1)`, `f″(1)`,
//! `ρ = ln f′(1)`, the function
//! `φ(s) = 1/(1 − f(s)) − 1/(f′(1)(1 − s))` with its limit `f″(1)/(2f′(1)²)`
//! at `s = 1`, and a sampler for the total offspring of `z` parents.
//!
//! Near `s = 1` the naive formulas cancel catastrophically, so every quantity
//! is also available in the complement coordinate `t = 1 − s`, where each
//! family has an exact rearrangement without cancellation.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Geometric, Poisson, StandardNormal};
use serde::Serialize;
use thiserror::Error;

/// Width of the window below `s = 1` where `φ` and `ψ` switch to their limits.
pub const EPS_SWITCH: f64 = 1e-7;

/// Explicit supports larger than this are rejected.
pub const MAX_EXPLICIT_SUPPORT: usize = 100_000;

/// Largest exact population total the sampler will produce.
pub const MAX_EXACT_TOTAL: f64 = 1.8e19;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OffspringError {
    #[error("argument s = {0} is outside [0, 1]")]
    Domain(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("Condition 2 violated: mean offspring {mean} must be positive and finite")]
    Condition2Violated { mean: f64 },
    #[error("Condition 4 violated: P(xi >= 2) = 0")]
    Condition4Violated,
    #[error("offspring total overflows the 64-bit population counter")]
    Overflow,
}

/// Offspring distribution of one environment state.
#[derive(Debug, Clone, PartialEq)]
pub enum OffspringLaw {
    /// `P(ξ = k) = (1 − p) pᵏ`, pgf `(1 − p)/(1 − ps)`.
    Geometric {
        p: f64,
    },
    Poisson {
        lambda: f64,
    },
    Explicit(ExplicitLaw),
}

/// Finite-support law with the polynomial coefficients used by the stable forms.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitLaw {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
    /// `G_l = P(ξ > l)`, so `1 − f(s) = (1 − s) Σ G_l s^l`.
    tail: Vec<f64>,
    /// `H_r = Σ_{l>r} G_l`, so `f′(1) − Σ G_l s^l = (1 − s) Σ H_r s^r`.
    tail2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    /// `f′(1)`
    pub mean: f64,
    /// `f″(1) = E[ξ(ξ − 1)]`
    pub second_factorial: f64,
    /// `P(ξ ≥ 2)`
    pub p_ge2: f64,
}

/// How the `z`-fold offspring total is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Closed-form convolutions; `O(1)` per generation for Geometric and Poisson.
    #[default]
    Aggregate,
    /// One draw per parent; for validating the aggregate path only.
    PerIndividual,
}

impl ExplicitLaw {
    pub fn new(pmf: Vec<f64>) -> Result<Self, OffspringError> {
        if pmf.is_empty() || pmf.len() > MAX_EXPLICIT_SUPPORT {
            return Err(OffspringError::InvalidParameter(format!("explicit pmf needs between 1 and {MAX_EXPLICIT_SUPPORT} entries")));
        }
        if let Some(p) = pmf.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(OffspringError::InvalidParameter(format!("pmf entry {p} is negative")));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(OffspringError::InvalidParameter(format!("pmf sums to {total}")));
        }
        let mut pmf: Vec<f64> = pmf.iter().map(|p| p / total).collect();
        while pmf.len() > 1 && *pmf.last().unwrap() == 0.0 {
            pmf.pop();
        }
        let mut cdf = Vec::with_capacity(pmf.len());
        let mut acc = 0.0;
        for p in &pmf {
            acc += p;
            cdf.push(acc);
        }
        let k = pmf.len();
        // G_l = Σ_{k>l} p_k, summed from the top to keep small tails accurate
        let mut tail = vec![0.0; k.saturating_sub(1)];
        let mut acc = 0.0;
        for l in (0..k.saturating_sub(1)).rev() {
            acc += pmf[l + 1];
            tail[l] = acc;
        }
        let mut tail2 = vec![0.0; k.saturating_sub(2)];
        let mut acc = 0.0;
        for r in (0..k.saturating_sub(2)).rev() {
            acc += tail[r + 1];
            tail2[r] = acc;
        }
        Ok(Self { pmf, cdf, tail, tail2 })
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        match self.cdf.iter().position(|&c| u < c) {
            Some(k) => k as u64,
            None => self.pmf.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u64,
        }
    }
}

fn horner(coef: &[f64], s: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * s + c)
}

/// `1/(1 − e^{−w}) − 1/w`, continuous at `w = 0` with value `1/2`.
fn bernoulli_gap(w: f64) -> f64 {
    if w < 1e-2 {
        let w2 = w * w;
        0.5 + w / 12.0 - w * w2 / 720.0 + w * w2 * w2 / 30240.0
    } else if w.is_infinite() {
        1.0
    } else {
        1.0 / (-(-w).exp_m1()) - 1.0 / w
    }
}

/// `t + ln(1 − t)` without cancellation for small `t`.
fn log1m_excess(t: f64) -> f64 {
    if t < 1e-2 {
        let mut term = t * t;
        let mut sum = 0.0;
        for k in 2..=10 {
            sum -= term / k as f64;
            term *= t;
        }
        sum
    } else {
        t + (-t).ln_1p()
    }
}

impl OffspringLaw {
    /// Geometric law with parameter `p ∈ (0,1)`, mean `p/(1−p)`.
    pub fn geometric(p: f64) -> Result<Self, OffspringError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(OffspringError::InvalidParameter(format!("geometric p = {p} not in (0,1)")));
        }
        Ok(Self::Geometric { p })
    }

    /// Geometric law with the given mean.
    pub fn geometric_with_mean(mean: f64) -> Result<Self, OffspringError> {
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(OffspringError::Condition2Violated { mean });
        }
        Self::geometric(mean / (1.0 + mean))
    }

    pub fn poisson(lambda: f64) -> Result<Self, OffspringError> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(OffspringError::Condition2Violated { mean: lambda });
        }
        Ok(Self::Poisson { lambda })
    }

    pub fn explicit(pmf: Vec<f64>) -> Result<Self, OffspringError> {
        Ok(Self::Explicit(ExplicitLaw::new(pmf)?))
    }

    /// The same family rescaled to the given mean, where the family allows it.
    pub fn with_mean(&self, mean: f64) -> Result<Self, OffspringError> {
        match self {
            Self::Geometric { .. } => Self::geometric_with_mean(mean),
            Self::Poisson { .. } => Self::poisson(mean),
            Self::Explicit(_) => Err(OffspringError::InvalidParameter("explicit laws cannot be rescaled to a new mean".into())),
        }
    }

    /// `f(s) = E[s^ξ]`.
    pub fn pgf(&self, s: f64) -> Result<f64, OffspringError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(OffspringError::Domain(s));
        }
        Ok(match self {
            Self::Geometric { p } => (1.0 - p) / (1.0 - p * s),
            Self::Poisson { lambda } => (lambda * (s - 1.0)).exp(),
            Self::Explicit(law) => horner(&law.pmf, s),
        })
    }

    /// `1 − f(1 − t)` for `t ∈ [0,1]`, accurate to relative precision.
    pub fn pgf_complement(&self, t: f64) -> f64 {
        match self {
            Self::Geometric { p } => p * t / ((1.0 - p) + p * t),
            Self::Poisson { lambda } => -(-lambda * t).exp_m1(),
            Self::Explicit(law) => t * horner(&law.tail, 1.0 - t),
        }
    }

    pub fn moments(&self) -> Result<Moments, OffspringError> {
        let m = self.raw_moments();
        if !(m.mean > 0.0 && m.mean.is_finite() && m.second_factorial.is_finite()) {
            return Err(OffspringError::Condition2Violated { mean: m.mean });
        }
        if !(m.p_ge2 > 0.0) {
            return Err(OffspringError::Condition4Violated);
        }
        Ok(m)
    }

    fn raw_moments(&self) -> Moments {
        match self {
            Self::Geometric { p } => {
                let q = 1.0 - p;
                Moments { mean: p / q, second_factorial: 2.0 * p * p / (q * q), p_ge2: p * p }
            }
            Self::Poisson { lambda } => {
                Moments { mean: *lambda, second_factorial: lambda * lambda, p_ge2: -(-lambda).exp_m1() - lambda * (-lambda).exp() }
            }
            Self::Explicit(law) => {
                let mut mean = 0.0;
                let mut second = 0.0;
                for (k, p) in law.pmf.iter().enumerate() {
                    let k = k as f64;
                    mean += k * p;
                    second += k * (k - 1.0) * p;
                }
                Moments { mean, second_factorial: second, p_ge2: law.pmf.iter().skip(2).sum() }
            }
        }
    }

    /// `f′(1)`, without validation.
    pub fn mean(&self) -> f64 {
        self.raw_moments().mean
    }

    /// `Var(ξ) = f″(1) + f′(1) − f′(1)²`.
    pub fn variance(&self) -> f64 {
        let m = self.raw_moments();
        m.second_factorial + m.mean - m.mean * m.mean
    }

    /// `ρ = ln f′(1)`.
    pub fn rho(&self) -> Result<f64, OffspringError> {
        Ok(self.moments()?.mean.ln())
    }

    /// `f″(1)/(2 f′(1)²)`, the value of `φ` at `s = 1`.
    pub fn phi_at_one(&self) -> f64 {
        let m = self.raw_moments();
        m.second_factorial / (2.0 * m.mean * m.mean)
    }

    /// `φ(s) = 1/(1 − f(s)) − 1/(f′(1)(1 − s))`.
    pub fn phi(&self, s: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&s), "phi argument {s} outside [0,1]");
        self.phi_complement(1.0 - s.clamp(0.0, 1.0))
    }

    /// `φ(1 − t)`.
    pub fn phi_complement(&self, t: f64) -> f64 {
        if t <= EPS_SWITCH {
            return self.phi_at_one();
        }
        match self {
            // linear-fractional pgf: φ is constant
            Self::Geometric { .. } => 1.0,
            Self::Poisson { lambda } => bernoulli_gap(lambda * t),
            Self::Explicit(law) => {
                let s = 1.0 - t;
                let g = horner(&law.tail, s);
                let h = horner(&law.tail2, s);
                h / (g * self.raw_moments().mean)
            }
        }
    }

    /// Total offspring of `z` parents under the default aggregate mode.
    pub fn sample_total<R: Rng + ?Sized>(&self, z: u64, rng: &mut R) -> Result<u64, OffspringError> {
        self.sample_total_with(SamplingMode::Aggregate, z, rng)
    }

    pub fn sample_total_with<R: Rng + ?Sized>(&self, mode: SamplingMode, z: u64, rng: &mut R) -> Result<u64, OffspringError> {
        if z == 0 {
            return Ok(0);
        }
        if mode == SamplingMode::PerIndividual {
            let mut total: u64 = 0;
            for _ in 0..z {
                total = total.checked_add(self.sample_one(rng)).ok_or(OffspringError::Overflow)?;
            }
            return Ok(total);
        }
        match self {
            Self::Geometric { p } => {
                if z <= 16 {
                    let single = Geometric::new(1.0 - p).expect("p in (0,1)");
                    let mut total: u64 = 0;
                    for _ in 0..z {
                        total = total.checked_add(single.sample(rng)).ok_or(OffspringError::Overflow)?;
                    }
                    Ok(total)
                } else {
                    // negative binomial as a gamma mixture of Poissons
                    let scale = p / (1.0 - p);
                    if z as f64 * scale > MAX_EXACT_TOTAL / 2.0 {
                        return Err(OffspringError::Overflow);
                    }
                    let lambda = Gamma::new(z as f64, scale).expect("positive shape").sample(rng);
                    sample_poisson(lambda, rng)
                }
            }
            Self::Poisson { lambda } => sample_poisson(z as f64 * lambda, rng),
            Self::Explicit(law) => {
                if z <= 32 {
                    let mut total: u64 = 0;
                    for _ in 0..z {
                        total = total.checked_add(law.sample_one(rng)).ok_or(OffspringError::Overflow)?;
                    }
                    return Ok(total);
                }
                // multinomial split of the parents over the support
                let mut remaining = z;
                let mut mass = 1.0;
                let mut total: u64 = 0;
                let last = law.pmf.len() - 1;
                for (k, &p) in law.pmf.iter().enumerate() {
                    if remaining == 0 {
                        break;
                    }
                    let count = if k == last || p >= mass {
                        remaining
                    } else if p <= 0.0 {
                        0
                    } else {
                        Binomial::new(remaining, (p / mass).clamp(0.0, 1.0)).expect("valid binomial").sample(rng)
                    };
                    remaining -= count;
                    mass -= p;
                    let add = (k as u64).checked_mul(count).ok_or(OffspringError::Overflow)?;
                    total = total.checked_add(add).ok_or(OffspringError::Overflow)?;
                }
                Ok(total)
            }
        }
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            Self::Geometric { p } => Geometric::new(1.0 - p).expect("p in (0,1)").sample(rng),
            Self::Poisson { lambda } => Poisson::new(*lambda).expect("positive lambda").sample(rng) as u64,
            Self::Explicit(law) => law.sample_one(rng),
        }
    }

    /// Total offspring of a very large population, drawn from the normal law
    /// with the exact mean and variance of the `z`-fold sum.
    pub fn sample_total_large<R: Rng + ?Sized>(&self, z: f64, rng: &mut R) -> f64 {
        let mean = z * self.mean();
        let sd = (z * self.variance()).sqrt();
        let noise: f64 = StandardNormal.sample(rng);
        (mean + sd * noise).round().max(0.0)
    }
}

fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u64, OffspringError> {
    if lambda <= 0.0 {
        return Ok(0);
    }
    if !(lambda <= Poisson::<f64>::MAX_LAMBDA) {
        return Err(OffspringError::Overflow);
    }
    let draw: f64 = Poisson::new(lambda).map_err(|_| OffspringError::Overflow)?.sample(rng);
    if draw >= MAX_EXACT_TOTAL {
        return Err(OffspringError::Overflow);
    }
    Ok(draw as u64)
}

/// `ψ_z(s) = 1/(1 − s^z) − 1/(z(1 − s))`, with limit `(z − 1)/(2z)` at `s = 1`.
pub fn psi(z: u64, s: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&s), "psi argument {s} outside [0,1]");
    psi_complement(z, 1.0 - s.clamp(0.0, 1.0))
}

/// `ψ_z(1 − t)`.
pub fn psi_complement(z: u64, t: f64) -> f64 {
    debug_assert!(z >= 1);
    if z <= 1 {
        return 0.0;
    }
    let zf = z as f64;
    // the limit is only accurate while z·t is small, not merely t
    if zf * t <= EPS_SWITCH {
        return 0.5 * (zf - 1.0) / zf;
    }
    if t >= 1.0 {
        return 1.0 - 1.0 / zf;
    }
    // with w = −z ln(1 − t):  ψ = [1/(1 − e^{−w}) − 1/w] + [1/w − 1/(zt)]
    let w = -zf * (-t).ln_1p();
    let second = if t < 1e-2 {
        // 1/w − 1/(zt) = (zt − w)/(w z t) and zt − w = z (t + ln(1 − t))
        zf * log1m_excess(t) / (w * zf * t)
    } else {
        1.0 / w - 1.0 / (zf * t)
    };
    bernoulli_gap(w) + second
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn laws() -> Vec<OffspringLaw> {
        vec![
            OffspringLaw::geometric(0.5).unwrap(),
            OffspringLaw::geometric(2.0 / 3.0).unwrap(),
            OffspringLaw::geometric(0.2).unwrap(),
            OffspringLaw::poisson(1.0).unwrap(),
            OffspringLaw::poisson(0.3).unwrap(),
            OffspringLaw::poisson(4.0).unwrap(),
            OffspringLaw::explicit(vec![0.25, 0.5, 0.25]).unwrap(),
            OffspringLaw::explicit(vec![0.4, 0.1, 0.2, 0.0, 0.3]).unwrap(),
        ]
    }

    /// Naive `φ` straight from the definition, usable away from `s = 1`.
    fn phi_naive(law: &OffspringLaw, s: f64) -> f64 {
        1.0 / (1.0 - law.pgf(s).unwrap()) - 1.0 / (law.mean() * (1.0 - s))
    }

    #[test]
    fn pgf_examples() {
        let g = OffspringLaw::geometric(0.5).unwrap();
        assert_abs_diff_eq!(g.pgf(0.0).unwrap(), 0.5, epsilon = 1e-15);
        let g = OffspringLaw::geometric(2.0 / 3.0).unwrap();
        assert_abs_diff_eq!(g.pgf(0.0).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        for law in laws() {
            assert_abs_diff_eq!(law.pgf(1.0).unwrap(), 1.0, epsilon = 1e-15);
        }
        assert!(matches!(g.pgf(1.5), Err(OffspringError::Domain(_))));
        assert!(matches!(g.pgf(-0.1), Err(OffspringError::Domain(_))));
    }

    #[test]
    fn moment_examples() {
        let m = OffspringLaw::geometric(2.0 / 3.0).unwrap().moments().unwrap();
        assert_abs_diff_eq!(m.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.second_factorial, 8.0, epsilon = 1e-12);
        let m = OffspringLaw::geometric(1.0 / 3.0).unwrap().moments().unwrap();
        assert_abs_diff_eq!(m.mean, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.second_factorial, 0.5, epsilon = 1e-12);
        assert_eq!(OffspringLaw::explicit(vec![0.5, 0.5]).unwrap().moments(), Err(OffspringError::Condition4Violated));
        assert!(matches!(OffspringLaw::explicit(vec![1.0]).unwrap().moments(), Err(OffspringError::Condition2Violated { .. })));
        let p = OffspringLaw::poisson(1.5).unwrap().moments().unwrap();
        assert_abs_diff_eq!(p.second_factorial, 2.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p.p_ge2, 1.0 - (-1.5f64).exp() * 2.5, epsilon = 1e-14);
    }

    #[test]
    fn rho_examples() {
        let r = |p| OffspringLaw::geometric(p).unwrap().rho().unwrap();
        assert_abs_diff_eq!(r(2.0 / 3.0), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(r(0.5), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r(1.0 / 3.0), -(2f64.ln()), epsilon = 1e-12);
        for law in laws() {
            let m = law.moments().unwrap();
            assert_abs_diff_eq!(m.mean, law.rho().unwrap().exp(), epsilon = 1e-12 * m.mean);
        }
    }

    #[test]
    fn phi_examples() {
        for p in [0.1, 0.5, 2.0 / 3.0, 0.9] {
            let g = OffspringLaw::geometric(p).unwrap();
            assert_abs_diff_eq!(g.phi(1.0), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(g.phi_at_one(), 1.0, epsilon = 1e-12);
        }
        let g = OffspringLaw::geometric(2.0 / 3.0).unwrap();
        assert_abs_diff_eq!(g.phi(0.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(phi_naive(&g, 0.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(OffspringLaw::poisson(1.0).unwrap().phi(1.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn phi_matches_definition_away_from_one() {
        for law in laws() {
            for s in [0.0, 0.1, 0.37, 0.5, 0.8, 0.95, 0.99] {
                let naive = phi_naive(&law, s);
                assert_abs_diff_eq!(law.phi(s), naive, epsilon = 1e-10 * (1.0 + naive.abs()));
            }
        }
    }

    #[test]
    fn phi_is_continuous_at_switch() {
        for law in laws() {
            let just_below = law.phi(1.0 - 2.0 * EPS_SWITCH);
            assert!((just_below - law.phi_at_one()).abs() <= 1e-5, "{law:?}");
        }
    }

    #[test]
    fn phi_sanity_window() {
        for law in laws() {
            let lo = 0.5 * law.phi(0.0);
            let hi = 2.0 * law.phi_at_one();
            for k in 0..=100 {
                let v = law.phi(k as f64 / 100.0);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{law:?} at {k}: {v}");
            }
        }
    }

    #[test]
    fn psi_examples() {
        for s in [0.0, 0.3, 0.9, 1.0] {
            assert_eq!(psi(1, s), 0.0);
        }
        assert_abs_diff_eq!(psi(2, 1.0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(psi(2, 0.0), 0.5, epsilon = 1e-15);
        // direct formula where it is well conditioned
        for z in [2u64, 3, 5, 17, 1000, 1 << 40] {
            for s in [0.0f64, 0.2, 0.5, 0.9, 0.999] {
                let zf = z as f64;
                let direct = 1.0 / (1.0 - s.powf(zf)) - 1.0 / (zf * (1.0 - s));
                let tol = if zf * (1.0 - s) < 1.0 { 1e-6 } else { 1e-10 };
                assert_abs_diff_eq!(psi(z, s), direct, epsilon = tol * (1.0 + direct.abs()));
            }
            let zf = z as f64;
            let limit = 0.5 * (zf - 1.0) / zf;
            let t = 2.0 * EPS_SWITCH / zf;
            assert!((psi(z, 1.0 - t) - limit).abs() < 1e-6, "z={z}");
        }
    }

    #[test]
    fn psi_polynomial_oracle() {
        // ψ_z(s) = H(s) / (z G(s)) with G = Σ_{j<z} s^j, H = Σ_{l≤z−2} (z−1−l) s^l
        for z in 2u64..=40 {
            for s in [0.0f64, 0.25, 0.6, 0.97, 0.9999, 1.0 - 3e-7] {
                let g: f64 = (0..z).map(|j| s.powi(j as i32)).sum();
                let h: f64 = (0..z - 1).map(|l| (z - 1 - l) as f64 * s.powi(l as i32)).sum();
                assert_abs_diff_eq!(psi(z, s), h / (z as f64 * g), epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn explicit_matches_brute_force() {
        let pmf = vec![0.1, 0.2, 0.3, 0.15, 0.25];
        let law = OffspringLaw::explicit(pmf.clone()).unwrap();
        for s in [0.0f64, 0.3, 0.77, 1.0] {
            let direct: f64 = pmf.iter().enumerate().map(|(k, p)| p * s.powi(k as i32)).sum();
            assert_abs_diff_eq!(law.pgf(s).unwrap(), direct, epsilon = 1e-12);
            assert_abs_diff_eq!(law.pgf_complement(1.0 - s), 1.0 - direct, epsilon = 1e-12);
        }
        let m = law.moments().unwrap();
        let mean: f64 = pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        let fact: f64 = pmf.iter().enumerate().map(|(k, p)| (k * k.saturating_sub(1)) as f64 * p).sum();
        assert_abs_diff_eq!(m.mean, mean, epsilon = 1e-12);
        assert_abs_diff_eq!(m.second_factorial, fact, epsilon = 1e-12);
        assert_abs_diff_eq!(m.p_ge2, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn pgf_is_monotone_and_convex() {
        for law in laws() {
            let grid: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
            let values: Vec<f64> = grid.iter().map(|&s| law.pgf(s).unwrap()).collect();
            let slopes: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]) * 200.0).collect();
            assert!(slopes.iter().all(|&d| d >= -1e-12));
            assert!(slopes.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{law:?}");
        }
    }

    #[test]
    fn complement_is_accurate_near_one() {
        for law in laws() {
            let m = law.mean();
            for t in [1e-6, 1e-9, 1e-12] {
                let c = law.pgf_complement(t);
                // 1 − f(1 − t) = m t − f″(1) t²/2 + O(t³)
                let approx = m * t - law.raw_moments().second_factorial * t * t / 2.0;
                assert!((c - approx).abs() <= 1e-6 * c, "{law:?} t={t}");
            }
        }
    }

    #[test]
    fn sample_total_empty_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for law in laws() {
            assert_eq!(law.sample_total(0, &mut rng), Ok(0));
        }
    }

    fn mean_and_se(draws: &[u64]) -> (f64, f64) {
        let n = draws.len() as f64;
        let mean = draws.iter().map(|&d| d as f64).sum::<f64>() / n;
        let var = draws.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn poisson_total_has_additive_mean() {
        let law = OffspringLaw::poisson(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<u64> = (0..100_000).map(|_| law.sample_total(5, &mut rng).unwrap()).collect();
        let (mean, se) = mean_and_se(&draws);
        assert!((mean - 5.0).abs() <= 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn geometric_single_matches_pmf() {
        // chi-square against (1/2)^{k+1}, cells 0..=9 and a tail cell
        let law = OffspringLaw::geometric(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000usize;
        let mut counts = [0usize; 11];
        for _ in 0..n {
            let k = law.sample_total(1, &mut rng).unwrap() as usize;
            counts[k.min(10)] += 1;
        }
        let mut chi2 = 0.0;
        for (k, &c) in counts.iter().enumerate() {
            let p = if k < 10 { 0.5f64.powi(k as i32 + 1) } else { 0.5f64.powi(10) };
            let e = p * n as f64;
            chi2 += (c as f64 - e).powi(2) / e;
        }
        // 10 degrees of freedom, 0.999 quantile ≈ 29.6
        assert!(chi2 < 29.6, "chi2 = {chi2}");
    }

    #[test]
    fn aggregate_means_within_four_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for law in laws() {
            for z in [1u64, 7, 40, 1000] {
                let draws: Vec<u64> = (0..100_000).map(|_| law.sample_total(z, &mut rng).unwrap()).collect();
                let (mean, se) = mean_and_se(&draws);
                let expected = z as f64 * law.mean();
                assert!((mean - expected).abs() <= 4.0 * se, "{law:?} z={z}: {mean} vs {expected} ± {se}");
            }
        }
    }

    #[test]
    fn aggregate_and_individual_agree_in_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for law in laws() {
            let z = 50;
            let agg: Vec<u64> = (0..40_000).map(|_| law.sample_total(z, &mut rng).unwrap()).collect();
            let ind: Vec<u64> = (0..40_000).map(|_| law.sample_total_with(SamplingMode::PerIndividual, z, &mut rng).unwrap()).collect();
            let var = |d: &[u64]| {
                let (m, _) = mean_and_se(d);
                d.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (d.len() as f64 - 1.0)
            };
            let expected = z as f64 * law.variance();
            for v in [var(&agg), var(&ind)] {
                assert!((v / expected - 1.0).abs() < 0.05, "{law:?}: {v} vs {expected}");
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let law = OffspringLaw::poisson(4.0).unwrap();
        assert_eq!(law.sample_total(u64::MAX / 2, &mut rng), Err(OffspringError::Overflow));
        let law = OffspringLaw::geometric(0.9).unwrap();
        assert_eq!(law.sample_total(u64::MAX / 4, &mut rng), Err(OffspringError::Overflow));
    }
}
